//! Deterministic numeric kernels and seeded random streams shared by all modules.
//!
//! Every stochastic component of the crate draws from a [`StreamRng`] keyed by
//! a `(seed, stream)` pair. Equal pairs yield bit-identical sequences; distinct
//! stream ids yield independent sequences, which is how concurrent workers stay
//! schedule-independent.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};

/// Counter-based RNG: cheap to fork into independent streams.
pub type StreamRng = ChaCha8Rng;

/// Vectors with a norm below this floor have no usable direction; callers
/// treat angles against them as undefined.
pub const NORM_FLOOR: f64 = 1e-12;

/// Fixed stream-id layout so that every consumer of randomness in a run is
/// isolated from the others.
pub mod streams {
    /// Synthetic dataset generation.
    pub const DATASET: u64 = 0;
    /// Participant data partitioning.
    pub const PARTITION: u64 = 1;
    /// Label corruption.
    pub const CORRUPTION: u64 = 2;
    /// Per-participant batch scheduling: `TRAIN_BASE + participant id`.
    pub const TRAIN_BASE: u64 = 1_000;
    /// Per-participant sharing decisions: `SHARE_BASE + participant id`.
    pub const SHARE_BASE: u64 = 2_000;
    /// Mean-estimation Monte Carlo: `MEANLAB_BASE + grid index`.
    pub const MEANLAB_BASE: u64 = 10_000;
}

/// Build the RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Temperature softmax with max-subtraction for stability.
///
/// Output entries are positive and sum to 1 within 1e-12. Positivity holds
/// as long as `(max - min) / temperature` stays inside `exp`'s range
/// (about 745); beyond that the smallest entries underflow to zero.
pub fn softmax_t(logits: ArrayView1<'_, f64>, temperature: f64) -> Result<Array1<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::param(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    if logits.len() < 2 {
        return Err(Error::param(
            "logits",
            format!("need at least 2 entries, got {}", logits.len()),
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| ((z - max) / temperature).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|e| e / sum);
    Ok(out)
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
///
/// Returns `None` when either norm is below [`NORM_FLOOR`]: the direction is
/// undefined and the caller decides what that means.
pub fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<Option<f64>> {
    if u.len() != v.len() {
        return Err(Error::dim(format!(
            "cosine expects equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Ok(None);
    }
    Ok(Some((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0)))
}

/// Draw from a symmetric Dirichlet(delta) over `n` categories.
///
/// Gamma draws normalized onto the simplex; entries are nonnegative and sum
/// to 1 within 1e-12.
pub fn sample_dirichlet(delta: f64, n: usize, rng: &mut StreamRng) -> Result<Array1<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::param(
            "delta",
            format!("must be positive and finite, got {delta}"),
        ));
    }
    if n < 2 {
        return Err(Error::param(
            "n",
            format!("need at least 2 categories, got {n}"),
        ));
    }
    let gamma = Gamma::new(delta, 1.0)
        .map_err(|e| Error::param("delta", format!("gamma sampler rejected shape: {e}")))?;
    // Tiny shapes can underflow every draw to zero; retry with fresh draws.
    for _ in 0..100 {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(Array1::from_iter(draws.into_iter().map(|g| g / sum)));
        }
    }
    Err(Error::param(
        "delta",
        format!("all gamma draws underflowed for delta={delta}"),
    ))
}

/// Draw from a normal with the given mean and variance.
///
/// Zero variance returns the mean exactly.
pub fn sample_normal(mean: f64, variance: f64, rng: &mut StreamRng) -> Result<f64> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::param(
            "variance",
            format!("must be nonnegative and finite, got {variance}"),
        ));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    let normal = Normal::new(mean, variance.sqrt())
        .map_err(|e| Error::param("variance", format!("normal sampler rejected: {e}")))?;
    Ok(normal.sample(rng))
}
