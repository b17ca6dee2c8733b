//! Two-client mean estimation lab: closed-form aggregation rules, empirical
//! losses, usefulness bounds, and the Monte Carlo experiments that verify
//! them.
//!
//! Two clients hold true means θ₁, θ₂; each sees only an empirical mean
//! `θ̂ₖ ~ N(θₖ, γ²)`. Plain averaging (the federated estimate) and the
//! reputation-weighted estimate are compared by their *usefulness*: the
//! probability that the collaborative estimator beats the standalone
//! empirical mean in squared error. Ties count as success.
//!
//! The heterogeneity parameter is `γ_G² = ((θ₁ − θ₂)/2)²`. The sweep grid is
//! expressed directly in units of γ_G: a grid value `g` puts the true means
//! `2g` apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_normal, stream_rng, streams};

/// Configuration for both Monte Carlo studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanLabConfig {
    /// True mean of client 1; client 2 sits at `theta1 + 2·γ_G` per grid point.
    pub theta1: f64,
    /// Variance γ² of each empirical mean in the heterogeneity sweep.
    pub gamma_sq: f64,
    /// Monte Carlo repetitions per grid point.
    pub runs: usize,
    /// Heterogeneity grid (values of γ_G).
    pub gamma_g_grid: Vec<f64>,
    /// Reputation is 1 for empirical heterogeneity at or below this.
    pub rep_full_threshold: f64,
    /// Reputation is 0 for empirical heterogeneity above this.
    pub rep_zero_threshold: f64,
    /// Noise variance σ² in the imbalanced-sample study.
    pub sigma_sq: f64,
    /// Per-client sample counts (N₁, N₂) swept by the imbalanced study;
    /// client k's empirical mean has variance σ²/Nₖ.
    pub sample_counts: Vec<(u64, u64)>,
    pub seed: u64,
}

impl Default for MeanLabConfig {
    fn default() -> Self {
        MeanLabConfig {
            theta1: 0.0,
            gamma_sq: 1.0,
            runs: 10_000,
            gamma_g_grid: (0..=20).map(|i| i as f64 * 0.25).collect(),
            rep_full_threshold: 1.0,
            rep_zero_threshold: 2.0,
            sigma_sq: 5.0,
            sample_counts: vec![(1, 1), (2, 1), (5, 1), (10, 1), (20, 1), (50, 1), (100, 1)],
            seed: 0,
        }
    }
}

impl MeanLabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_sq > 0.0) {
            return Err(Error::Config(format!(
                "gamma_sq must be positive, got {}",
                self.gamma_sq
            )));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.gamma_g_grid.is_empty() {
            return Err(Error::Config("gamma_g_grid must be nonempty".into()));
        }
        if !(self.rep_full_threshold >= 0.0 && self.rep_full_threshold < self.rep_zero_threshold) {
            return Err(Error::Config(format!(
                "reputation thresholds must satisfy 0 <= full < zero, got {} and {}",
                self.rep_full_threshold, self.rep_zero_threshold
            )));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(Error::Config(format!(
                "sigma_sq must be positive, got {}",
                self.sigma_sq
            )));
        }
        if self.sample_counts.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Plain federated estimate: the midpoint of the two empirical means.
pub fn fedavg_estimate(theta_hat_1: f64, theta_hat_2: f64) -> f64 {
    (theta_hat_1 + theta_hat_2) / 2.0
}

/// Empirical heterogeneity between two shared means: `((θ̂₂ − θ̂₁)/2)²`.
///
/// Both clients compute the same value, hence the same reputation.
pub fn empirical_heterogeneity(theta_hat_1: f64, theta_hat_2: f64) -> f64 {
    ((theta_hat_2 - theta_hat_1) / 2.0).powi(2)
}

/// Piecewise reputation from empirical heterogeneity `d`:
/// 1 for `d ≤ 1`, `2 − d` for `1 < d ≤ 2`, 0 beyond. Continuous at both knees.
pub fn cycle_reputation(d: f64) -> Result<f64> {
    cycle_reputation_with(d, 1.0, 2.0)
}

/// [`cycle_reputation`] with configurable knees.
pub fn cycle_reputation_with(d: f64, full_threshold: f64, zero_threshold: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::param("d", format!("must be nonnegative, got {d}")));
    }
    if !(full_threshold >= 0.0 && full_threshold < zero_threshold) {
        return Err(Error::param(
            "full_threshold",
            format!("need 0 <= full < zero, got {full_threshold} and {zero_threshold}"),
        ));
    }
    Ok(if d <= full_threshold {
        1.0
    } else if d <= zero_threshold {
        (zero_threshold - d) / (zero_threshold - full_threshold)
    } else {
        0.0
    })
}

/// Reputation-weighted estimate: `(1 − r/2)·θ̂_own + (r/2)·θ̂_other`.
pub fn cycle_estimate(theta_hat_own: f64, theta_hat_other: f64, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param("r", format!("must be in [0, 1], got {r}")));
    }
    Ok((1.0 - r / 2.0) * theta_hat_own + (r / 2.0) * theta_hat_other)
}

/// Client 1's empirical loss under plain averaging:
/// `γ̂_G² + (θ̂₁ − θ₁)²`.
pub fn empirical_loss_fedavg(theta_hat_1: f64, theta_hat_2: f64, theta_1: f64) -> f64 {
    empirical_heterogeneity(theta_hat_1, theta_hat_2) + (theta_hat_1 - theta_1).powi(2)
}

/// Client 1's empirical loss under the reputation-weighted estimate:
/// `r²·γ̂_G² + (θ̂₁ − θ₁)²`.
pub fn empirical_loss_cycle(
    theta_hat_1: f64,
    theta_hat_2: f64,
    theta_1: f64,
    r: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param("r", format!("must be in [0, 1], got {r}")));
    }
    Ok(r * r * empirical_heterogeneity(theta_hat_1, theta_hat_2) + (theta_hat_1 - theta_1).powi(2))
}

/// Upper bound on averaging's usefulness: `2·exp(−γ_G²/(5γ²))`.
///
/// Vacuous (value 2) at zero heterogeneity; callers clamp to 1 for display.
pub fn fedavg_usefulness_upper_bound(gamma_g: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param(
            "gamma",
            format!("must be positive, got {gamma}"),
        ));
    }
    Ok(2.0 * (-(gamma_g * gamma_g) / (5.0 * gamma * gamma)).exp())
}

/// Lower bound on the reputation-weighted scheme's usefulness:
/// `(1/8)·exp(−1/(4γ²))`. Independent of heterogeneity.
pub fn cycle_usefulness_lower_bound(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::param(
            "gamma",
            format!("must be positive, got {gamma}"),
        ));
    }
    Ok((1.0 / 8.0) * (-1.0 / (4.0 * gamma * gamma)).exp())
}

/// Monte Carlo estimates at one heterogeneity grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessPoint {
    pub gamma_g: f64,
    pub fedavg_p: f64,
    pub fedavg_se: f64,
    pub cycle_p1: f64,
    pub cycle_se1: f64,
    pub cycle_p2: f64,
    pub cycle_se2: f64,
    /// Unclamped Lemma-style upper bound for averaging.
    pub bound_upper_fedavg: f64,
    /// Theorem-style lower bound for the reputation-weighted scheme.
    pub bound_lower_cycle: f64,
}

/// Results of the heterogeneity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessCurve {
    pub runs: usize,
    pub points: Vec<UsefulnessPoint>,
}

fn binomial_se(p: f64, runs: usize) -> f64 {
    (p * (1.0 - p) / runs as f64).sqrt()
}

/// Sweep the heterogeneity grid, estimating usefulness for the federated
/// midpoint and for each client's reputation-weighted estimate.
///
/// Grid point `i` draws from its own RNG stream, so results are independent
/// of evaluation order.
pub fn mc_usefulness_sweep(config: &MeanLabConfig) -> Result<UsefulnessCurve> {
    config.validate()?;
    let gamma = config.gamma_sq.sqrt();
    let mut points = Vec::with_capacity(config.gamma_g_grid.len());
    for (i, &gamma_g) in config.gamma_g_grid.iter().enumerate() {
        if !(gamma_g >= 0.0) {
            return Err(Error::Config(format!(
                "gamma_g must be nonnegative, got {gamma_g}"
            )));
        }
        let mut rng = stream_rng(config.seed, streams::MEANLAB_BASE + i as u64);
        let theta1 = config.theta1;
        let theta2 = config.theta1 + 2.0 * gamma_g;
        let mut fed_hits = 0usize;
        let mut c1_hits = 0usize;
        let mut c2_hits = 0usize;
        for _ in 0..config.runs {
            let hat1 = sample_normal(theta1, config.gamma_sq, &mut rng)?;
            let hat2 = sample_normal(theta2, config.gamma_sq, &mut rng)?;
            let d = empirical_heterogeneity(hat1, hat2);
            let r = cycle_reputation_with(d, config.rep_full_threshold, config.rep_zero_threshold)?;
            let w_fed = fedavg_estimate(hat1, hat2);
            let w1 = cycle_estimate(hat1, hat2, r)?;
            let w2 = cycle_estimate(hat2, hat1, r)?;
            let base1 = (hat1 - theta1).powi(2);
            let base2 = (hat2 - theta2).powi(2);
            if (w_fed - theta1).powi(2) <= base1 {
                fed_hits += 1;
            }
            if (w1 - theta1).powi(2) <= base1 {
                c1_hits += 1;
            }
            if (w2 - theta2).powi(2) <= base2 {
                c2_hits += 1;
            }
        }
        let runs = config.runs as f64;
        let (fedavg_p, cycle_p1, cycle_p2) = (
            fed_hits as f64 / runs,
            c1_hits as f64 / runs,
            c2_hits as f64 / runs,
        );
        points.push(UsefulnessPoint {
            gamma_g,
            fedavg_p,
            fedavg_se: binomial_se(fedavg_p, config.runs),
            cycle_p1,
            cycle_se1: binomial_se(cycle_p1, config.runs),
            cycle_p2,
            cycle_se2: binomial_se(cycle_p2, config.runs),
            bound_upper_fedavg: fedavg_usefulness_upper_bound(gamma_g, gamma)?,
            bound_lower_cycle: cycle_usefulness_lower_bound(gamma)?,
        });
    }
    Ok(UsefulnessCurve {
        runs: config.runs,
        points,
    })
}

/// Monte Carlo estimates for one (N₁, N₂) sample-count pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancePoint {
    pub n1: u64,
    pub n2: u64,
    pub fedavg_p: f64,
    pub cycle_p1: f64,
    pub cycle_p2: f64,
    pub w1_mean: f64,
    pub w1_std: f64,
    pub w2_mean: f64,
    pub w2_std: f64,
    pub fedavg_mean: f64,
    pub fedavg_std: f64,
}

/// Imbalanced-sample study: both true means are zero, but the clients see
/// empirical means of different variance `σ²/Nₖ`.
pub fn mc_imbalanced(config: &MeanLabConfig) -> Result<Vec<ImbalancePoint>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.sample_counts.len());
    for (i, &(n1, n2)) in config.sample_counts.iter().enumerate() {
        let mut rng = stream_rng(config.seed, streams::MEANLAB_BASE + 5_000 + i as u64);
        let var1 = config.sigma_sq / n1 as f64;
        let var2 = config.sigma_sq / n2 as f64;
        let mut fed_hits = 0usize;
        let mut c1_hits = 0usize;
        let mut c2_hits = 0usize;
        let mut w1s = Vec::with_capacity(config.runs);
        let mut w2s = Vec::with_capacity(config.runs);
        let mut feds = Vec::with_capacity(config.runs);
        for _ in 0..config.runs {
            let hat1 = sample_normal(0.0, var1, &mut rng)?;
            let hat2 = sample_normal(0.0, var2, &mut rng)?;
            let d = empirical_heterogeneity(hat1, hat2);
            let r = cycle_reputation_with(d, config.rep_full_threshold, config.rep_zero_threshold)?;
            let w_fed = fedavg_estimate(hat1, hat2);
            let w1 = cycle_estimate(hat1, hat2, r)?;
            let w2 = cycle_estimate(hat2, hat1, r)?;
            if (w_fed).powi(2) <= hat1.powi(2) {
                fed_hits += 1;
            }
            if w1.powi(2) <= hat1.powi(2) {
                c1_hits += 1;
            }
            if w2.powi(2) <= hat2.powi(2) {
                c2_hits += 1;
            }
            w1s.push(w1);
            w2s.push(w2);
            feds.push(w_fed);
        }
        let runs = config.runs as f64;
        let stats = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / runs;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / runs;
            (mean, var.sqrt())
        };
        let (w1_mean, w1_std) = stats(&w1s);
        let (w2_mean, w2_std) = stats(&w2s);
        let (fedavg_mean, fedavg_std) = stats(&feds);
        out.push(ImbalancePoint {
            n1,
            n2,
            fedavg_p: fed_hits as f64 / runs,
            cycle_p1: c1_hits as f64 / runs,
            cycle_p2: c2_hits as f64 / runs,
            w1_mean,
            w1_std,
            w2_mean,
            w2_std,
            fedavg_mean,
            fedavg_std,
        });
    }
    Ok(out)
}
