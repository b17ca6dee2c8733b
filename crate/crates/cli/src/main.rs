//! `cycle` — run decentralized-learning experiments, the mean-estimation
//! lab, side-by-side comparisons, and synthetic dataset generation.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cycle_core::data;
use cycle_core::meanlab::MeanLabConfig;
use cycle_core::numerics::{stream_rng, streams};
use cycle_core::runner::{self, DatasetSpec};

#[derive(Parser)]
#[command(
    name = "cycle",
    version,
    about = "Decentralized-learning protocol simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured protocol(s) plus a shared standalone baseline.
    Run(RunArgs),
    /// Two-client mean-estimation Monte Carlo studies.
    MeanLab(MeanLabArgs),
    /// Compare two emitted metrics.json files.
    Compare(CompareArgs),
    /// Generate a synthetic blobs dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MeanLabArgs {
    /// Lab configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out/mean-lab")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Left metrics.json.
    left: PathBuf,
    /// Right metrics.json.
    right: PathBuf,
    /// Also write the comparison as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a header row.
    #[arg(long)]
    header: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::MeanLab(args) => mean_lab(args),
        Command::Compare(args) => compare(args),
        Command::GenData(args) => gen_data(args),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = runner::load_config(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    let reports = runner::run(&config)?;
    for report in &reports {
        let cgs = report
            .summary
            .cgs
            .map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<12} MVA {:>7.3}  MCG {:>7.3}  CGS {}",
            report.mode.to_string(),
            report.summary.mva,
            report.summary.mcg,
            cgs
        );
    }
    println!("artifacts under {}", config.out_dir.display());
    Ok(())
}

fn mean_lab(args: MeanLabArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => runner::load_mean_lab_config(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => MeanLabConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = runner::run_mean_lab(&config, &args.out)?;
    println!(
        "{} grid points x {} runs; {} sample-count pairs",
        report.curve.points.len(),
        report.curve.runs,
        report.imbalance.len()
    );
    println!("artifacts under {}", args.out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let left = runner::load_metrics(&args.left)
        .with_context(|| format!("loading {}", args.left.display()))?;
    let right = runner::load_metrics(&args.right)
        .with_context(|| format!("loading {}", args.right.display()))?;
    let comparison = runner::compare(&left, &right)?;
    print!("{}", comparison.to_table_string());
    if let Some(out) = args.out {
        std::fs::write(&out, comparison.to_csv_string())
            .with_context(|| format!("writing {}", out.display()))?;
        println!("csv written to {}", out.display());
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec::Blobs {
        num_classes: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class,
        spread: args.spread,
    };
    if args.classes < 2 || args.dim < 2 || args.per_class < 2 {
        bail!("need at least 2 classes, 2 dimensions, and 2 samples per class");
    }
    let mut rng = stream_rng(args.seed, streams::DATASET);
    let dataset = match spec {
        DatasetSpec::Blobs {
            num_classes,
            dim,
            samples_per_class,
            spread,
        } => data::make_blobs(num_classes, dim, samples_per_class, spread, &mut rng)?,
        DatasetSpec::Csv { .. } => unreachable!(),
    };
    data::save_csv(&dataset, &args.out, args.header)?;
    println!(
        "{} samples, {} features, {} classes -> {}",
        dataset.len(),
        dataset.dim(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}
