//! Fairness accounting: collaboration gains, MVA/MCG/CGS, correlation-based
//! fairness, and the single-tail Chebyshev bound on negative gain.
//!
//! Accuracies are percentages in `[0, 100]` throughout this module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One participant's before/after accuracy and gain, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantGain {
    pub id: usize,
    pub standalone: f64,
    pub collaborative: f64,
    pub gain: f64,
}

/// Per-participant gains for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub entries: Vec<ParticipantGain>,
}

impl GainRecord {
    pub fn standalone(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.standalone).collect()
    }

    pub fn collaborative(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.collaborative).collect()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gain).collect()
    }
}

/// Pair up standalone and post-collaboration accuracies by participant id.
pub fn gain_record(
    standalone: &[(usize, f64)],
    collaborative: &[(usize, f64)],
) -> Result<GainRecord> {
    if standalone.len() != collaborative.len() {
        return Err(Error::dim(format!(
            "{} standalone entries vs {} collaborative",
            standalone.len(),
            collaborative.len()
        )));
    }
    let mut entries = Vec::with_capacity(standalone.len());
    for (&(id_b, b), &(id_a, a)) in standalone.iter().zip(collaborative.iter()) {
        if id_b != id_a {
            return Err(Error::param(
                "collaborative",
                format!("participant ids do not match: {id_b} vs {id_a}"),
            ));
        }
        for (name, v) in [("standalone", b), ("collaborative", a)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::param(
                    "accuracy",
                    format!("{name} accuracy {v} for participant {id_b} outside [0, 100]"),
                ));
            }
        }
        entries.push(ParticipantGain {
            id: id_b,
            standalone: b,
            collaborative: a,
            gain: a - b,
        });
    }
    Ok(GainRecord { entries })
}

/// Which denominator the gain-spread standard deviation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgsDenominator {
    /// N−1 (sample standard deviation) — the normative definition.
    Sample,
    /// N — exposed for reconciliation with rounded published tables.
    Population,
}

/// Mean validation accuracy, mean collaboration gain, and gain spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    /// Mean of post-collaboration accuracies.
    pub mva: f64,
    /// Mean collaboration gain.
    pub mcg: f64,
    /// Collaboration gain spread; `None` for a single participant.
    pub cgs: Option<f64>,
    /// Correlation between standalone and final accuracies; `None` when
    /// either side is constant.
    pub pearson_cf: Option<f64>,
}

/// Summarize with the sample (N−1) gain-spread denominator.
pub fn summarize(record: &GainRecord) -> Result<FairnessSummary> {
    summarize_with(record, CgsDenominator::Sample)
}

pub fn summarize_with(record: &GainRecord, denominator: CgsDenominator) -> Result<FairnessSummary> {
    let n = record.entries.len();
    if n == 0 {
        return Err(Error::param("record", "need at least one participant"));
    }
    let gains = record.gains();
    let mcg = gains.iter().sum::<f64>() / n as f64;
    let mva = record.collaborative().iter().sum::<f64>() / n as f64;
    let cgs = if n < 2 {
        None
    } else {
        let ss: f64 = gains.iter().map(|g| (g - mcg).powi(2)).sum();
        let denom = match denominator {
            CgsDenominator::Sample => (n - 1) as f64,
            CgsDenominator::Population => n as f64,
        };
        Some((ss / denom).sqrt())
    };
    let pearson_cf = if n < 2 {
        None
    } else {
        pearson_cf(&record.standalone(), &record.collaborative())?
    };
    Ok(FairnessSummary {
        mva,
        mcg,
        cgs,
        pearson_cf,
    })
}

/// Pearson correlation between contributions `b` and rewards `x`.
///
/// Returns `None` when either vector is constant — the coefficient is
/// undefined there, not zero.
pub fn pearson_cf(b: &[f64], x: &[f64]) -> Result<Option<f64>> {
    if b.len() != x.len() {
        return Err(Error::dim(format!(
            "pearson_cf expects equal lengths, got {} and {}",
            b.len(),
            x.len()
        )));
    }
    if b.len() < 2 {
        return Err(Error::param("b", "need at least 2 points"));
    }
    let n = b.len() as f64;
    let mb = b.iter().sum::<f64>() / n;
    let mx = x.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vb = 0.0;
    let mut vx = 0.0;
    for (&bi, &xi) in b.iter().zip(x.iter()) {
        cov += (bi - mb) * (xi - mx);
        vb += (bi - mb).powi(2);
        vx += (xi - mx).powi(2);
    }
    if vb == 0.0 || vx == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (vb * vx).sqrt()).clamp(-1.0, 1.0)))
}

/// Chebyshev single-tail bound on the probability of non-positive gain:
/// `ν² / (ν² + μ²)`, valid only for `μ > 0`.
pub fn chebyshev_negative_gain_bound(mu: f64, nu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::param(
            "mu",
            format!("bound requires mu > 0, got {mu}"),
        ));
    }
    if !(nu >= 0.0) {
        return Err(Error::param("nu", format!("must be nonnegative, got {nu}")));
    }
    if nu == 0.0 {
        return Ok(0.0);
    }
    Ok(nu * nu / (nu * nu + mu * mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pair(values: &[f64]) -> Vec<(usize, f64)> {
        values.iter().cloned().enumerate().collect()
    }

    #[test]
    fn homogeneous_fixture_summary() {
        let b = [83.42, 83.67, 83.15, 83.13, 83.63];
        let a = [86.12, 87.03, 86.33, 85.62, 86.10];
        let record = gain_record(&pair(&b), &pair(&a)).unwrap();
        let s = summarize(&record).unwrap();
        assert_abs_diff_eq!(s.mva, 86.24, epsilon = 0.005);
        assert_abs_diff_eq!(s.mcg, 2.84, epsilon = 0.005);
        // Hand-derived from the N−1 definition.
        assert_abs_diff_eq!(s.cgs.unwrap(), 0.408, epsilon = 0.001);
        let pop = summarize_with(&record, CgsDenominator::Population).unwrap();
        assert_abs_diff_eq!(pop.cgs.unwrap(), 0.365, epsilon = 0.001);
    }

    #[test]
    fn equal_gains_have_zero_spread() {
        let b = [50.0, 60.0, 70.0];
        let a = [55.0, 65.0, 75.0];
        let record = gain_record(&pair(&b), &pair(&a)).unwrap();
        let s = summarize(&record).unwrap();
        assert_eq!(s.cgs, Some(0.0));
        assert_abs_diff_eq!(s.mcg, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let b = [60.0, 70.0, 80.0, 55.0];
        let a = [66.0, 71.0, 79.0, 60.0];
        let record = gain_record(&pair(&b), &pair(&a)).unwrap();
        let s1 = summarize(&record).unwrap();
        let mut rev = record.clone();
        rev.entries.reverse();
        let s2 = summarize(&rev).unwrap();
        assert_abs_diff_eq!(s1.mva, s2.mva, epsilon = 1e-12);
        assert_abs_diff_eq!(s1.mcg, s2.mcg, epsilon = 1e-12);
        assert_abs_diff_eq!(s1.cgs.unwrap(), s2.cgs.unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn single_participant_has_undefined_spread() {
        let record = gain_record(&[(0, 80.0)], &[(0, 82.0)]).unwrap();
        let s = summarize(&record).unwrap();
        assert_eq!(s.cgs, None);
    }

    #[test]
    fn pearson_on_two_points() {
        // Two points in the same order correlate perfectly even when the
        // gains tell the opposite story.
        assert_eq!(pearson_cf(&[60.0, 80.0], &[70.0, 70.1]).unwrap(), Some(1.0));
        assert_eq!(
            pearson_cf(&[60.0, 80.0], &[10.0, -9.9]).unwrap(),
            Some(-1.0)
        );
        let b = [60.0, 80.0];
        assert_eq!(pearson_cf(&b, &b).unwrap(), Some(1.0));
    }

    #[test]
    fn pearson_undefined_for_constant_input() {
        assert_eq!(
            pearson_cf(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(),
            None
        );
        assert_eq!(pearson_cf(&[1.0, 2.0], &[7.0, 7.0]).unwrap(), None);
    }

    #[test]
    fn chebyshev_bound_values() {
        assert_abs_diff_eq!(
            chebyshev_negative_gain_bound(1.0, 1.0).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_eq!(chebyshev_negative_gain_bound(2.0, 0.0).unwrap(), 0.0);
        let b = chebyshev_negative_gain_bound(2.84, 0.408).unwrap();
        assert_abs_diff_eq!(b, 1.0 / (1.0 + (2.84f64 / 0.408).powi(2)), epsilon = 1e-15);
        assert!((b - 0.0202).abs() < 0.0005);
        assert!(chebyshev_negative_gain_bound(0.0, 1.0).is_err());
        assert!(chebyshev_negative_gain_bound(-1.0, 1.0).is_err());
    }

    #[test]
    fn chebyshev_bound_monotonicity() {
        let mut prev = chebyshev_negative_gain_bound(0.1, 1.0).unwrap();
        for i in 1..50 {
            let mu = 0.1 + i as f64 * 0.1;
            let b = chebyshev_negative_gain_bound(mu, 1.0).unwrap();
            assert!(b < prev, "not decreasing in mu at {mu}");
            prev = b;
        }
        let mut prev = chebyshev_negative_gain_bound(1.0, 0.1).unwrap();
        for i in 1..50 {
            let nu = 0.1 + i as f64 * 0.1;
            let b = chebyshev_negative_gain_bound(1.0, nu).unwrap();
            assert!(b > prev, "not increasing in nu at {nu}");
            prev = b;
        }
    }

    #[test]
    fn gain_record_examples() {
        let record = gain_record(&[(0, 92.77)], &[(0, 93.80)]).unwrap();
        assert_abs_diff_eq!(record.entries[0].gain, 1.03, epsilon = 1e-12);
        let record = gain_record(&[(0, 92.77)], &[(0, 90.23)]).unwrap();
        assert_abs_diff_eq!(record.entries[0].gain, -2.54, epsilon = 1e-12);

        let same = [(0, 70.0), (1, 80.0)];
        let record = gain_record(&same, &same).unwrap();
        assert!(record.gains().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gain_record_rejects_mismatched_ids() {
        assert!(gain_record(&[(0, 80.0)], &[(1, 82.0)]).is_err());
        assert!(gain_record(&[(0, 80.0), (1, 70.0)], &[(0, 82.0)]).is_err());
    }
}
