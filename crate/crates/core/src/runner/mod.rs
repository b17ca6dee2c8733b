//! Experiment orchestration and result emission.
//!
//! `run` builds the dataset and partition from the config, applies any label
//! corruption, computes one standalone baseline, then executes every
//! configured mode against that shared baseline. Each mode writes its
//! artifacts under `<out_dir>/<mode>/`; the run as a whole writes a config
//! echo and a manifest listing every artifact. Identical config and seed
//! produce byte-identical metrics and reputation files.

mod config;

pub use config::{
    load_config, parse_config, CorruptionSpec, DatasetSpec, ExperimentConfig, SplitSpec,
};

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DataPartition, Dataset};
use crate::error::{Error, Result};
use crate::meanlab::{self, MeanLabConfig};
use crate::metrics::{self, CgsDenominator, ParticipantGain};
use crate::numerics::{stream_rng, streams};
use crate::protocol::{self, ExperimentRun, Mode};

/// One participant's results in percentage points, plus its per-round
/// holdout-accuracy trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantReport {
    pub id: usize,
    pub standalone: f64,
    pub collaborative: f64,
    pub gain: f64,
    pub trajectory: Vec<f64>,
}

/// Fairness summary as emitted, carrying both gain-spread denominators and
/// both correlation variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mva: f64,
    pub mcg: f64,
    pub cgs: Option<f64>,
    pub cgs_population: Option<f64>,
    pub pearson_cf: Option<f64>,
    pub pearson_cf_gain: Option<f64>,
}

/// Payload of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub seed: u64,
    pub participants: Vec<ParticipantGain>,
    pub summary: MetricsSummary,
}

/// Full record of one mode's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub seed: u64,
    pub participants: Vec<ParticipantReport>,
    pub summary: MetricsSummary,
    /// Reputation snapshot files, relative to the run's output directory.
    pub reputation_files: Vec<String>,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

/// Build the dataset a config describes.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs {
            num_classes,
            dim,
            samples_per_class,
            spread,
        } => {
            let mut rng = stream_rng(seed, streams::DATASET);
            data::make_blobs(*num_classes, *dim, *samples_per_class, *spread, &mut rng)
        }
        DatasetSpec::Csv { path, has_header } => data::load_csv(path, *has_header),
    }
}

/// Partition the dataset per the split spec.
pub fn build_partition(dataset: &Dataset, split: &SplitSpec, seed: u64) -> Result<DataPartition> {
    let mut rng = stream_rng(seed, streams::PARTITION);
    match *split {
        SplitSpec::Homogeneous {
            participants,
            holdout_fraction,
        } => data::split_homogeneous(dataset, participants, holdout_fraction, &mut rng),
        SplitSpec::Dirichlet {
            participants,
            delta,
            holdout_fraction,
        } => data::split_dirichlet(dataset, participants, delta, holdout_fraction, &mut rng),
        SplitSpec::Imbalanced {
            participants,
            kappa,
            m,
            holdout_fraction,
        } => data::split_imbalanced(dataset, participants, kappa, m, holdout_fraction, &mut rng),
    }
}

fn summarize_run(run: &ExperimentRun) -> Result<(Vec<ParticipantGain>, MetricsSummary)> {
    let standalone: Vec<(usize, f64)> = run
        .standalone_accuracy
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, a * 100.0))
        .collect();
    let collaborative: Vec<(usize, f64)> = run
        .final_accuracy
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, a * 100.0))
        .collect();
    let record = metrics::gain_record(&standalone, &collaborative)?;
    let sample = metrics::summarize(&record)?;
    let population = metrics::summarize_with(&record, CgsDenominator::Population)?;
    let pearson_gain = metrics::pearson_cf(&record.standalone(), &record.gains())?;
    Ok((
        record.entries.clone(),
        MetricsSummary {
            mva: sample.mva,
            mcg: sample.mcg,
            cgs: sample.cgs,
            cgs_population: population.cgs,
            pearson_cf: sample.pearson_cf,
            pearson_cf_gain: pearson_gain,
        },
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gains_csv(participants: &[ParticipantGain]) -> String {
    let mut out = String::from("participant,standalone,collaborative,gain\n");
    for p in participants {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.id, p.standalone, p.collaborative, p.gain
        ));
    }
    out
}

/// Execute every configured mode and write all artifacts under
/// `config.out_dir`. Returns the reports in mode order.
pub fn run(config: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

    let whole = Instant::now();
    let dataset = build_dataset(&config.dataset, config.seed)?;
    let mut partition = build_partition(&dataset, &config.split, config.seed)?;
    let mut corruption_rng = stream_rng(config.seed, streams::CORRUPTION);
    for c in &config.corruption {
        partition = data::flip_labels(
            &dataset,
            &partition,
            c.participant,
            c.flip_rate,
            &mut corruption_rng,
        )?;
    }

    let baseline = protocol::run_baseline(&dataset, &partition, &config.protocol, config.seed)?;

    let mut artifacts = vec!["config.json".to_string()];
    write_text(
        &config.out_dir.join("config.json"),
        &config.to_json_string()?,
    )?;

    let mut reports = Vec::new();
    for mode in config.mode_list() {
        let mode_started = Instant::now();
        let mut protocol_config = config.protocol.clone();
        protocol_config.mode = mode;
        let run = protocol::run_protocol_with_baseline(
            &dataset,
            &partition,
            &protocol_config,
            config.seed,
            Some(&baseline),
        )?;

        let mode_dir = config.out_dir.join(mode.to_string());
        fs::create_dir_all(&mode_dir).map_err(|e| Error::io(&mode_dir, e))?;
        let (participants, summary) = summarize_run(&run)?;

        let run_metrics = RunMetrics {
            mode,
            seed: config.seed,
            participants: participants.clone(),
            summary: summary.clone(),
        };
        write_text(
            &mode_dir.join("metrics.json"),
            &(serde_json::to_string_pretty(&run_metrics)? + "\n"),
        )?;
        write_text(&mode_dir.join("gains.csv"), &gains_csv(&participants))?;
        artifacts.push(format!("{mode}/metrics.json"));
        artifacts.push(format!("{mode}/gains.csv"));

        let mut reputation_files = Vec::new();
        for (t, snapshot) in run.snapshots.iter().enumerate() {
            let name = format!("reputation_t{t}.csv");
            write_text(&mode_dir.join(&name), &snapshot.to_csv_string())?;
            artifacts.push(format!("{mode}/{name}"));
            reputation_files.push(name);
        }

        let report = ExperimentReport {
            mode,
            seed: config.seed,
            participants: participants
                .iter()
                .zip(run.trajectory.iter())
                .map(|(p, traj)| ParticipantReport {
                    id: p.id,
                    standalone: p.standalone,
                    collaborative: p.collaborative,
                    gain: p.gain,
                    trajectory: traj.iter().map(|a| a * 100.0).collect(),
                })
                .collect(),
            summary,
            reputation_files,
            wall_clock_secs: mode_started.elapsed().as_secs_f64(),
            config: config.clone(),
        };
        write_text(
            &mode_dir.join("report.json"),
            &(serde_json::to_string_pretty(&report)? + "\n"),
        )?;
        artifacts.push(format!("{mode}/report.json"));
        reports.push(report);
    }

    let manifest = Manifest {
        seed: config.seed,
        wall_clock_secs: whole.elapsed().as_secs_f64(),
        artifacts,
    };
    write_text(
        &config.out_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    Ok(reports)
}

pub fn load_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parse a `gains.csv` back into `(id, standalone, collaborative, gain)` rows.
pub fn load_gains_csv(path: &Path) -> Result<Vec<(usize, f64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 4 columns, found {}", cells.len()),
            });
        }
        let parse_err = |reason: String| Error::Csv {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        rows.push((
            cells[0].parse().map_err(|e| parse_err(format!("{e}")))?,
            cells[1].parse().map_err(|e| parse_err(format!("{e}")))?,
            cells[2].parse().map_err(|e| parse_err(format!("{e}")))?,
            cells[3].parse().map_err(|e| parse_err(format!("{e}")))?,
        ));
    }
    Ok(rows)
}

/// One row of a side-by-side metric comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub delta: Option<f64>,
}

/// Side-by-side MVA/MCG/CGS plus per-participant gains for two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub left_mode: Mode,
    pub right_mode: Mode,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn to_csv_string(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::from("undefined"), |x| format!("{x}"));
        let mut out = String::from("metric,left,right,delta\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.metric,
                cell(row.left),
                cell(row.right),
                cell(row.delta)
            ));
        }
        out
    }

    pub fn to_table_string(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::from("undefined"), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<16} {:>12} {:>12} {:>12}\n",
            "metric",
            self.left_mode.to_string(),
            self.right_mode.to_string(),
            "delta"
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12} {:>12} {:>12}\n",
                row.metric,
                cell(row.left),
                cell(row.right),
                cell(row.delta)
            ));
        }
        out
    }
}

/// Compare two emitted metrics files; `delta = right − left`.
pub fn compare(left: &RunMetrics, right: &RunMetrics) -> Result<Comparison> {
    if left.participants.len() != right.participants.len() {
        return Err(Error::dim(format!(
            "cannot compare runs with {} and {} participants",
            left.participants.len(),
            right.participants.len()
        )));
    }
    let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(y - x),
        _ => None,
    };
    let mut rows = vec![
        CompareRow {
            metric: "mva".into(),
            left: Some(left.summary.mva),
            right: Some(right.summary.mva),
            delta: Some(right.summary.mva - left.summary.mva),
        },
        CompareRow {
            metric: "mcg".into(),
            left: Some(left.summary.mcg),
            right: Some(right.summary.mcg),
            delta: Some(right.summary.mcg - left.summary.mcg),
        },
        CompareRow {
            metric: "cgs".into(),
            left: left.summary.cgs,
            right: right.summary.cgs,
            delta: diff(left.summary.cgs, right.summary.cgs),
        },
    ];
    for (l, r) in left.participants.iter().zip(right.participants.iter()) {
        rows.push(CompareRow {
            metric: format!("gain_p{}", l.id),
            left: Some(l.gain),
            right: Some(r.gain),
            delta: Some(r.gain - l.gain),
        });
    }
    Ok(Comparison {
        left_mode: left.mode,
        right_mode: right.mode,
        rows,
    })
}

/// Mean-estimation lab outputs (heterogeneity sweep plus imbalance study).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLabReport {
    pub curve: meanlab::UsefulnessCurve,
    pub imbalance: Vec<meanlab::ImbalancePoint>,
}

fn usefulness_csv(curve: &meanlab::UsefulnessCurve) -> String {
    let mut out = String::from(
        "gammaG,fedavg_p,fedavg_se,cycle_p1,cycle_p2,bound_upper_fedavg,bound_lower_cycle\n",
    );
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.gamma_g,
            p.fedavg_p,
            p.fedavg_se,
            p.cycle_p1,
            p.cycle_p2,
            p.bound_upper_fedavg.min(1.0),
            p.bound_lower_cycle
        ));
    }
    out
}

fn imbalance_csv(points: &[meanlab::ImbalancePoint]) -> String {
    let mut out = String::from(
        "n1,n2,fedavg_p,cycle_p1,cycle_p2,w1_mean,w1_std,w2_mean,w2_std,fedavg_mean,fedavg_std\n",
    );
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            p.n1,
            p.n2,
            p.fedavg_p,
            p.cycle_p1,
            p.cycle_p2,
            p.w1_mean,
            p.w1_std,
            p.w2_mean,
            p.w2_std,
            p.fedavg_mean,
            p.fedavg_std
        ));
    }
    out
}

/// Run both mean-estimation studies and emit `usefulness.csv`,
/// `imbalanced.csv`, and a manifest under `out_dir`.
pub fn run_mean_lab(config: &MeanLabConfig, out_dir: &Path) -> Result<MeanLabReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = Instant::now();
    let curve = meanlab::mc_usefulness_sweep(config)?;
    let imbalance = meanlab::mc_imbalanced(config)?;
    write_text(&out_dir.join("usefulness.csv"), &usefulness_csv(&curve))?;
    write_text(&out_dir.join("imbalanced.csv"), &imbalance_csv(&imbalance))?;
    let manifest = Manifest {
        seed: config.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        artifacts: vec!["usefulness.csv".into(), "imbalanced.csv".into()],
    };
    write_text(
        &out_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    Ok(MeanLabReport { curve, imbalance })
}

/// Parse a `usefulness.csv` back into rows of floats.
pub fn load_usefulness_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("{e}"),
        })?);
    }
    Ok(rows)
}

pub fn parse_mean_lab_config(text: &str) -> Result<MeanLabConfig> {
    let config: MeanLabConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn load_mean_lab_config(path: &Path) -> Result<MeanLabConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mean_lab_config(&text)
}
