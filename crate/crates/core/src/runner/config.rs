//! Experiment configuration: a single JSON document covering dataset
//! construction, partitioning, protocol hyperparameters, corruption, seed,
//! and output location. Unknown keys are rejected by name; absent optional
//! fields take documented defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Mode, ProtocolConfig};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic Gaussian blobs, one cluster per class.
    Blobs {
        #[serde(default = "default_num_classes")]
        num_classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Comma-separated values: feature columns then one integer label column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

fn default_num_classes() -> usize {
    4
}
fn default_dim() -> usize {
    16
}
fn default_samples_per_class() -> usize {
    500
}
fn default_spread() -> f64 {
    1.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            num_classes: default_num_classes(),
            dim: default_dim(),
            samples_per_class: default_samples_per_class(),
            spread: default_spread(),
        }
    }
}

/// How samples are divided among participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Equal per-class counts for every participant.
    Homogeneous {
        #[serde(default = "default_participants")]
        participants: usize,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
    /// Size-skewed shares drawn from a symmetric Dirichlet.
    Dirichlet {
        #[serde(default = "default_participants")]
        participants: usize,
        delta: f64,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
    /// The first `m` participants each hold a `kappa` fraction of the data.
    Imbalanced {
        #[serde(default = "default_participants")]
        participants: usize,
        kappa: f64,
        m: usize,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
}

fn default_participants() -> usize {
    5
}
fn default_holdout() -> f64 {
    0.2
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Homogeneous {
            participants: default_participants(),
            holdout_fraction: default_holdout(),
        }
    }
}

impl SplitSpec {
    pub fn participants(&self) -> usize {
        match *self {
            SplitSpec::Homogeneous { participants, .. }
            | SplitSpec::Dirichlet { participants, .. }
            | SplitSpec::Imbalanced { participants, .. } => participants,
        }
    }
}

/// Label corruption applied to one participant's training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub participant: usize,
    pub flip_rate: f64,
}

/// Everything one experiment needs; serializes round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub protocol: ProtocolConfig,
    /// Optional suite: run these modes against one shared standalone
    /// baseline. Absent means just `protocol.mode`.
    pub modes: Option<Vec<Mode>>,
    pub corruption: Vec<CorruptionSpec>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        match self.dataset {
            DatasetSpec::Blobs {
                num_classes,
                dim,
                samples_per_class,
                spread,
            } => {
                if num_classes < 2 {
                    return Err(Error::Config(
                        "dataset.num_classes must be at least 2".into(),
                    ));
                }
                if dim < 2 {
                    return Err(Error::Config("dataset.dim must be at least 2".into()));
                }
                if samples_per_class < 2 {
                    return Err(Error::Config(
                        "dataset.samples_per_class must be at least 2".into(),
                    ));
                }
                if !(spread > 0.0) {
                    return Err(Error::Config(format!(
                        "dataset.spread must be positive, got {spread}"
                    )));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        let participants = self.split.participants();
        if participants == 0 {
            return Err(Error::Config(
                "split.participants must be at least 1".into(),
            ));
        }
        match self.split {
            SplitSpec::Homogeneous {
                holdout_fraction, ..
            }
            | SplitSpec::Dirichlet {
                holdout_fraction, ..
            }
            | SplitSpec::Imbalanced {
                holdout_fraction, ..
            } => {
                if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "split.holdout_fraction must be in (0, 1), got {holdout_fraction}"
                    )));
                }
            }
        }
        if let SplitSpec::Dirichlet { delta, .. } = self.split {
            if !(delta > 0.0) {
                return Err(Error::Config(format!(
                    "split.delta must be positive, got {delta}"
                )));
            }
        }
        if let SplitSpec::Imbalanced { kappa, m, .. } = self.split {
            if !(kappa > 0.0 && kappa < 1.0) {
                return Err(Error::Config(format!(
                    "split.kappa must be in (0, 1), got {kappa}"
                )));
            }
            if m == 0 || m >= participants {
                return Err(Error::Config(format!(
                    "split.m must satisfy 1 <= m < participants, got {m}"
                )));
            }
            if m as f64 * kappa >= 1.0 {
                return Err(Error::Config(format!(
                    "split.m * split.kappa must be below 1, got {}",
                    m as f64 * kappa
                )));
            }
        }
        for c in &self.corruption {
            if c.participant >= participants {
                return Err(Error::Config(format!(
                    "corruption.participant {} out of range for {participants} participants",
                    c.participant
                )));
            }
            if !(0.0..=1.0).contains(&c.flip_rate) {
                return Err(Error::Config(format!(
                    "corruption.flip_rate must be in [0, 1], got {}",
                    c.flip_rate
                )));
            }
        }
        if let Some(modes) = &self.modes {
            if modes.is_empty() {
                return Err(Error::Config("modes must be nonempty when present".into()));
            }
        }
        Ok(())
    }

    /// Modes this config executes, in order.
    pub fn mode_list(&self) -> Vec<Mode> {
        self.modes
            .clone()
            .unwrap_or_else(|| vec![self.protocol.mode])
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Parse a configuration document; unknown keys error by name.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
