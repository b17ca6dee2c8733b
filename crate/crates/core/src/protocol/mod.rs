//! The round engine: reputation scoring from gradient alignment, adaptive
//! sharing, the decentralized training loop, and the FedAvg / standalone
//! baselines over a simulated message bus.
//!
//! Execution is round-synchronous. All messages for round `t` are decided and
//! their payloads computed from end-of-round `t−1` state, then exchanged at a
//! barrier; within a round every participant steps independently, so results
//! never depend on scheduling order.

mod engine;
mod fedavg;

pub use engine::{
    cycle_participant_round, run_baseline, run_pdl, run_protocol, run_protocol_with_baseline,
    ExperimentRun, ParticipantState, ProtocolRun, RoundInput, RoundOutcome, ShareRequest,
};
pub use fedavg::{fedavg_aggregate, run_fedavg};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, StreamRng};
use rand::Rng;

/// Which training protocol a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reputation-scored adaptive sharing.
    Cycle,
    /// Vanilla decentralized distillation: fixed weights 1/(N−1), every
    /// message always sent.
    Vpdl,
    /// Centralized weighted parameter averaging.
    Fedavg,
    /// Local training only.
    Standalone,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mode::Cycle => "cycle",
            Mode::Vpdl => "vpdl",
            Mode::Fedavg => "fedavg",
            Mode::Standalone => "standalone",
        };
        write!(f, "{name}")
    }
}

/// Hyperparameters of the collaboration loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: Mode,
    /// Reputation momentum α.
    pub alpha: f64,
    /// Misalignment at or below this maps to full reputation.
    pub tau_opt: f64,
    /// Misalignment at or above this maps to zero reputation.
    pub tau_max: f64,
    /// Weight of the total distillation loss against cross-entropy.
    pub lambda0: f64,
    /// Forced-share and scoring period R: both happen when `t mod R = 0`.
    pub share_period: usize,
    /// Collaboration rounds t_max.
    pub rounds: usize,
    /// Local-only epochs before any collaboration.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `lr_decay_every` rounds.
    pub lr_decay: f64,
    /// 0 disables the schedule.
    pub lr_decay_every: usize,
    pub momentum: f64,
    /// Minibatch size; `null` trains on the full local set each round.
    pub batch_size: Option<usize>,
    /// Temperature of the distillation softmax (cross-entropy stays at 1).
    pub distill_temperature: f64,
    /// Alternative sharing gate: sender's message to `k` is gated on `k`'s
    /// estimate of the sender instead of the sender's estimate of `k`.
    pub gate_on_receiver_estimate: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            mode: Mode::Cycle,
            alpha: 0.5,
            tau_opt: 0.25,
            tau_max: 0.75,
            lambda0: 1.0,
            share_period: 5,
            rounds: 50,
            warmup_epochs: 10,
            learning_rate: 0.1,
            lr_decay: 0.1,
            lr_decay_every: 25,
            momentum: 0.9,
            batch_size: None,
            distill_temperature: 1.0,
            gate_on_receiver_estimate: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.tau_opt >= 0.0 && self.tau_max <= 1.0) {
            return Err(Error::Config(format!(
                "tau thresholds must lie in [0, 1], got {} and {}",
                self.tau_opt, self.tau_max
            )));
        }
        if !(self.tau_opt < self.tau_max) {
            return Err(Error::Config(format!(
                "tau_opt must be < tau_max, got {} and {}",
                self.tau_opt, self.tau_max
            )));
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda0 must be nonnegative, got {}",
                self.lambda0
            )));
        }
        if self.share_period == 0 {
            return Err(Error::Config("share_period must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive when set".into()));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::Config(format!(
                "distill_temperature must be positive, got {}",
                self.distill_temperature
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at collaboration round `t`.
    #[allow(clippy::manual_checked_ops)]
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((t / self.lr_decay_every) as i32)
        }
    }
}

/// Gradient misalignment `s = (1 − cos(g_ce, g_dl)) / 2`, in `[0, 1]`.
///
/// 0 means the distillation gradient reinforces the local objective, 1 means
/// it opposes it. When either gradient has no usable direction the value is
/// neutral, 0.5.
pub fn misalignment(grad_ce: ArrayView1<'_, f64>, grad_dl: ArrayView1<'_, f64>) -> Result<f64> {
    match numerics::cosine(grad_ce, grad_dl)? {
        Some(c) => Ok((1.0 - c) / 2.0),
        None => Ok(0.5),
    }
}

/// Piecewise-linear map from misalignment to raw reputation:
/// 1 at or below `tau_opt`, 0 at or above `tau_max`, linear between.
pub fn soft_clip(s: f64, tau_opt: f64, tau_max: f64) -> Result<f64> {
    if !(tau_opt < tau_max) {
        return Err(Error::Config(format!(
            "tau_opt must be < tau_max, got {tau_opt} and {tau_max}"
        )));
    }
    Ok(((s - tau_max) / (tau_opt - tau_max)).clamp(0.0, 1.0))
}

/// Momentum update of a reputation score; the first scoring adopts the raw
/// value directly.
pub fn update_reputation(r_prev: Option<f64>, r_tilde: f64, alpha: f64) -> f64 {
    let r = match r_prev {
        Some(prev) => alpha * prev + (1.0 - alpha) * r_tilde,
        None => r_tilde,
    };
    r.clamp(0.0, 1.0)
}

/// Sharing decision for round `t`: forced every `period` rounds, otherwise a
/// uniform draw `z ≤ r`. A reputation of exactly 0 never shares.
pub fn decide_share(r: f64, t: usize, period: usize, rng: &mut StreamRng) -> bool {
    if t.is_multiple_of(period) {
        return true;
    }
    if r <= 0.0 {
        return false;
    }
    let z: f64 = rng.random();
    z <= r
}

/// Predictions one participant shares with another in one round, or an
/// absent marker when the sender declined (or was not allowed) to share.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub sender: usize,
    pub receiver: usize,
    /// Teacher probability rows for the receiver's current batch.
    pub payload: Option<Array2<f64>>,
}

/// N×N snapshot of reputation scores; entry `(n, k)` is participant n's
/// estimate of k. The diagonal is written as 1.0 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationMatrix {
    values: Array2<f64>,
}

impl ReputationMatrix {
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Self {
        let n = rows.len();
        let mut values = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            for (k, rep) in row.iter().enumerate() {
                values[(i, k)] = if i == k { 1.0 } else { rep.unwrap_or(0.0) };
            }
        }
        ReputationMatrix { values }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, scorer: usize, scored: usize) -> f64 {
        self.values[(scorer, scored)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Row `n`, column `k` = r_(n,k), six decimal places.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row =
                row.map_err(|e| Error::param("reputation_csv", format!("line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::param("reputation_csv", "matrix must be square"));
        }
        let mut values = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                values[(i, k)] = v;
            }
        }
        Ok(ReputationMatrix { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use crate::numerics::stream_rng;

    #[test]
    fn misalignment_of_parallel_antiparallel_orthogonal() {
        let g = array![1.0, 2.0, -1.0];
        let mg = g.mapv(|x| -2.0 * x);
        assert_eq!(misalignment(g.view(), g.view()).unwrap(), 0.0);
        assert_eq!(misalignment(g.view(), mg.view()).unwrap(), 1.0);
        let a = array![1.0, 0.0];
        let b = array![0.0, 3.0];
        assert_eq!(misalignment(a.view(), b.view()).unwrap(), 0.5);
    }

    #[test]
    fn misalignment_neutral_on_vanished_gradient() {
        let g = array![1.0, 2.0];
        let zero = array![0.0, 0.0];
        assert_eq!(misalignment(g.view(), zero.view()).unwrap(), 0.5);
        assert_eq!(misalignment(zero.view(), zero.view()).unwrap(), 0.5);
    }

    #[test]
    fn soft_clip_boundaries_and_midpoint() {
        assert_eq!(soft_clip(0.25, 0.25, 0.75).unwrap(), 1.0);
        assert_eq!(soft_clip(0.75, 0.25, 0.75).unwrap(), 0.0);
        assert_abs_diff_eq!(soft_clip(0.5, 0.25, 0.75).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(soft_clip(0.0, 0.25, 0.75).unwrap(), 1.0);
        assert_eq!(soft_clip(1.0, 0.25, 0.75).unwrap(), 0.0);
        assert!(soft_clip(0.5, 0.75, 0.25).is_err());
        assert!(soft_clip(0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn reputation_update_rules() {
        assert_eq!(update_reputation(None, 0.8, 0.5), 0.8);
        assert_eq!(update_reputation(Some(1.0), 0.0, 0.5), 0.5);
        // Constant target: the gap halves every step at alpha = 0.5.
        let target = 0.3;
        let mut r = update_reputation(None, 0.9, 0.5);
        let mut gap = (r - target).abs();
        for _ in 0..20 {
            r = update_reputation(Some(r), target, 0.5);
            let new_gap = (r - target).abs();
            assert_abs_diff_eq!(new_gap, gap / 2.0, epsilon = 1e-12);
            gap = new_gap;
        }
        assert!(gap < 1e-6);
    }

    #[test]
    fn decide_share_forced_and_degenerate() {
        let mut rng = stream_rng(1, 0);
        for t in [0, 5, 10, 100] {
            assert!(decide_share(0.0, t, 5, &mut rng));
        }
        for t in [1, 2, 3, 4, 6, 7] {
            assert!(!decide_share(0.0, t, 5, &mut rng));
            assert!(decide_share(1.0, t, 5, &mut rng));
        }
    }

    #[test]
    fn decide_share_rate_tracks_reputation() {
        let mut rng = stream_rng(2, 0);
        let mut shared = 0;
        let n = 20_000;
        for _ in 0..n {
            if decide_share(0.3, 1, 5, &mut rng) {
                shared += 1;
            }
        }
        let rate = shared as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn reputation_matrix_round_trips_csv() {
        let rows = vec![vec![None, Some(0.25)], vec![Some(0.75), None]];
        let m = ReputationMatrix::from_rows(&rows);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.25);
        let text = m.to_csv_string();
        let back = ReputationMatrix::from_csv_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn config_validation_names_tau_ordering() {
        let config = ProtocolConfig {
            tau_opt: 0.8,
            tau_max: 0.75,
            ..ProtocolConfig::default()
        };
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("tau_opt must be < tau_max"), "got: {err}");
    }

    #[test]
    fn lr_schedule_decays_stepwise() {
        let config = ProtocolConfig::default(); // 0.1, decay 0.1 every 25
        assert_abs_diff_eq!(config.lr_at(0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(config.lr_at(24), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(config.lr_at(25), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(config.lr_at(50), 0.001, epsilon = 1e-15);
        let flat = ProtocolConfig {
            lr_decay_every: 0,
            ..ProtocolConfig::default()
        };
        assert_eq!(flat.lr_at(499), 0.1);
    }
}
