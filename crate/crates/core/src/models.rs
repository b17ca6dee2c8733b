//! Desk-scale softmax linear classifier with analytic gradients.
//!
//! The model is multinomial logistic regression: logits are an affine map of
//! the features, and both the cross-entropy loss and the distillation loss
//! (KL against fixed teacher predictions) have closed-form gradients with
//! respect to the flattened parameters. Gradients live in a single flat
//! vector laid out as the row-major weight matrix followed by the bias.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

/// Parameters of a softmax linear classifier.
///
/// `temperature` applies to distillation only; cross-entropy always uses T=1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub temperature: f64,
}

impl ModelParams {
    /// Zero-initialized parameters for `num_classes` classes over `dim` features.
    pub fn zeros(num_classes: usize, dim: usize, temperature: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param(
                "num_classes",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        if dim == 0 {
            return Err(Error::param("dim", "feature dimension must be positive"));
        }
        if !(temperature > 0.0) {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        Ok(ModelParams {
            weights: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
            temperature,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Length of the flattened parameter vector: `M*d + M`.
    pub fn flat_len(&self) -> usize {
        self.num_classes() * self.dim() + self.num_classes()
    }

    /// Flatten as row-major weights followed by bias.
    pub fn to_flat(&self) -> Array1<f64> {
        let mut flat = Vec::with_capacity(self.flat_len());
        flat.extend(self.weights.iter());
        flat.extend(self.bias.iter());
        Array1::from_vec(flat)
    }

    /// Rebuild from a flat vector produced by [`ModelParams::to_flat`].
    pub fn from_flat(
        flat: ArrayView1<'_, f64>,
        num_classes: usize,
        dim: usize,
        temperature: f64,
    ) -> Result<Self> {
        let expected = num_classes * dim + num_classes;
        if flat.len() != expected {
            return Err(Error::dim(format!(
                "flat parameter vector has length {}, expected {expected}",
                flat.len()
            )));
        }
        let weights = Array2::from_shape_vec(
            (num_classes, dim),
            flat.iter().take(num_classes * dim).cloned().collect(),
        )
        .expect("shape checked above");
        let bias = Array1::from_iter(flat.iter().skip(num_classes * dim).cloned());
        Ok(ModelParams {
            weights,
            bias,
            temperature,
        })
    }

    /// Write a JSON checkpoint (dims, temperature, flat values).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            num_classes: self.num_classes(),
            dim: self.dim(),
            temperature: self.temperature,
            values: self.to_flat().to_vec(),
        };
        let text = serde_json::to_string_pretty(&ckpt)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Read a checkpoint written by [`ModelParams::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("checkpoint", "non-finite parameter value"));
        }
        ModelParams::from_flat(
            Array1::from_vec(ckpt.values).view(),
            ckpt.num_classes,
            ckpt.dim,
            ckpt.temperature,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    num_classes: usize,
    dim: usize,
    temperature: f64,
    values: Vec<f64>,
}

/// A loss value paired with its gradient over the flattened parameters.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array1<f64>,
}

/// Logits for a batch: `features · Wᵀ + bias` per row.
pub fn forward(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.dim() {
        return Err(Error::dim(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.dim()
        )));
    }
    Ok(features.dot(&params.weights.t()) + &params.bias)
}

/// Per-row log-softmax of `logits / temperature`, max-subtracted.
fn log_softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max) / temperature);
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

fn check_batch(params: &ModelParams, features: ArrayView2<'_, f64>, rows: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::param("batch", "batch must be nonempty"));
    }
    if features.nrows() != rows {
        return Err(Error::dim(format!(
            "features have {} rows, batch has {rows}",
            features.nrows()
        )));
    }
    if features.ncols() != params.dim() {
        return Err(Error::dim(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Assemble the flat gradient from the per-logit gradient `dz` (B×M).
fn grad_from_dz(dz: &Array2<f64>, features: ArrayView2<'_, f64>, flat_len: usize) -> Array1<f64> {
    let grad_w = dz.t().dot(&features); // (M×B)·(B×d) = M×d
    let grad_b = dz.sum_axis(Axis(0)); // M
    let mut flat = Vec::with_capacity(flat_len);
    flat.extend(grad_w.iter());
    flat.extend(grad_b.iter());
    Array1::from_vec(flat)
}

/// Mean cross-entropy over the batch and its analytic gradient.
pub fn ce_loss_grad(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<LossGrad> {
    check_batch(params, features, labels.len())?;
    let classes = params.num_classes();
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::param(
                "labels",
                format!("label {y} at row {i} out of range for {classes} classes"),
            ));
        }
    }
    let batch = labels.len() as f64;
    let logits = forward(params, features)?;
    let lsm = log_softmax_rows(&logits, 1.0);

    let mut loss = 0.0;
    let mut dz = lsm.mapv(f64::exp); // softmax probabilities
    for (i, &y) in labels.iter().enumerate() {
        loss -= lsm[(i, y)];
        dz[(i, y)] -= 1.0;
    }
    loss /= batch;
    dz.mapv_inplace(|v| v / batch);

    Ok(LossGrad {
        loss: loss.max(0.0),
        grad: grad_from_dz(&dz, features, params.flat_len()),
    })
}

/// Mean KL(teacher ‖ student) over the batch and its analytic gradient.
///
/// The teacher rows are fixed probability vectors; no gradient flows into
/// them. The student distribution is the temperature softmax of the model's
/// logits at `params.temperature`.
pub fn kl_distill_loss_grad(
    params: &ModelParams,
    teacher_probs: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
) -> Result<LossGrad> {
    check_batch(params, features, teacher_probs.nrows())?;
    if teacher_probs.ncols() != params.num_classes() {
        return Err(Error::dim(format!(
            "teacher rows have {} entries, model has {} classes",
            teacher_probs.ncols(),
            params.num_classes()
        )));
    }
    for (i, row) in teacher_probs.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&q| q < -1e-6) {
            return Err(Error::param(
                "teacher_probs",
                format!("row {i} is not on the probability simplex (sum {sum})"),
            ));
        }
    }

    let temperature = params.temperature;
    let batch = teacher_probs.nrows() as f64;
    // Student probabilities go through the same path as `predict_probs`, so a
    // teacher equal to the student's own predictions cancels exactly.
    let mut dz = predict_probs(params, features)?;
    let mut loss = 0.0;
    for (i, row) in teacher_probs.rows().into_iter().enumerate() {
        for (j, &q) in row.iter().enumerate() {
            let q = q.max(0.0);
            if q > 0.0 {
                loss += q * (q.ln() - dz[(i, j)].ln());
            }
            dz[(i, j)] -= q;
        }
    }
    loss /= batch;
    dz.mapv_inplace(|v| v / (temperature * batch));

    Ok(LossGrad {
        loss: loss.max(0.0),
        grad: grad_from_dz(&dz, features, params.flat_len()),
    })
}

/// SGD with a momentum buffer owned by one participant.
///
/// `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    momentum: f64,
    velocity: Array1<f64>,
}

impl SgdOptimizer {
    pub fn new(flat_len: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::param(
                "momentum",
                format!("must be in [0, 1), got {momentum}"),
            ));
        }
        Ok(SgdOptimizer {
            momentum,
            velocity: Array1::zeros(flat_len),
        })
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grad: ArrayView1<'_, f64>,
        lr: f64,
    ) -> Result<()> {
        if grad.len() != params.flat_len() {
            return Err(Error::dim(format!(
                "gradient has length {}, parameters have {}",
                grad.len(),
                params.flat_len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::param("lr", format!("must be nonnegative, got {lr}")));
        }
        self.velocity
            .zip_mut_with(&grad, |v, &g| *v = self.momentum * *v + g);
        let classes = params.num_classes();
        let dim = params.dim();
        for c in 0..classes {
            for j in 0..dim {
                params.weights[(c, j)] -= lr * self.velocity[c * dim + j];
            }
        }
        for c in 0..classes {
            params.bias[c] -= lr * self.velocity[classes * dim + c];
        }
        Ok(())
    }
}

/// Fraction of samples whose argmax logit equals the label.
///
/// Ties break toward the lowest class index.
pub fn evaluate(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    check_batch(params, features, labels.len())?;
    let logits = forward(params, features)?;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Probability rows for a batch: temperature softmax of the logits.
pub fn predict_probs(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let logits = forward(params, features)?;
    let mut probs = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let p = numerics::softmax_t(row, params.temperature)?;
        probs.row_mut(i).assign(&p);
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    use crate::numerics::stream_rng;

    fn random_setup(
        rng: &mut crate::numerics::StreamRng,
        classes: usize,
        dim: usize,
        batch: usize,
    ) -> (ModelParams, Array2<f64>, Vec<usize>) {
        let mut params = ModelParams::zeros(classes, dim, 1.0).unwrap();
        params.weights.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        params.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let features = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        (params, features, labels)
    }

    /// Central finite differences of a scalar loss over the flat parameters.
    fn finite_diff(
        params: &ModelParams,
        loss_of: impl Fn(&ModelParams) -> f64,
        eps: f64,
    ) -> Array1<f64> {
        let flat = params.to_flat();
        let mut grad = Array1::zeros(flat.len());
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += eps;
            let mut minus = flat.clone();
            minus[i] -= eps;
            let p = ModelParams::from_flat(
                plus.view(),
                params.num_classes(),
                params.dim(),
                params.temperature,
            )
            .unwrap();
            let m = ModelParams::from_flat(
                minus.view(),
                params.num_classes(),
                params.dim(),
                params.temperature,
            )
            .unwrap();
            grad[i] = (loss_of(&p) - loss_of(&m)) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(analytic: &Array1<f64>, fd: &Array1<f64>) -> f64 {
        let scale = analytic
            .iter()
            .chain(fd.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1e-12);
        analytic
            .iter()
            .zip(fd.iter())
            .fold(0.0f64, |a, (&x, &y)| a.max((x - y).abs()))
            / scale
    }

    #[test]
    fn forward_zero_params_gives_zero_logits() {
        let params = ModelParams::zeros(3, 4, 1.0).unwrap();
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64);
        let logits = forward(&params, x.view()).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn forward_identity_weights() {
        let mut params = ModelParams::zeros(3, 3, 1.0).unwrap();
        for i in 0..3 {
            params.weights[(i, i)] = 1.0;
        }
        let logits = forward(&params, array![[1.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(logits, array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn forward_preserves_row_order() {
        let mut rng = stream_rng(3, 0);
        let (params, features, _) = random_setup(&mut rng, 3, 5, 7);
        let all = forward(&params, features.view()).unwrap();
        for i in 0..7 {
            let one = forward(&params, features.row(i).insert_axis(ndarray::Axis(0))).unwrap();
            assert_eq!(all.row(i), one.row(0));
        }
    }

    #[test]
    fn ce_uniform_prediction_is_log_classes() {
        let params = ModelParams::zeros(4, 6, 1.0).unwrap();
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i * j) as f64 * 0.1);
        let lg = ce_loss_grad(&params, x.view(), &[0, 1, 2, 3, 0]).unwrap();
        assert_abs_diff_eq!(lg.loss, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_saturated_prediction_has_tiny_loss() {
        let mut params = ModelParams::zeros(3, 2, 1.0).unwrap();
        params.bias[1] = 50.0;
        let lg = ce_loss_grad(&params, array![[0.0, 0.0]].view(), &[1]).unwrap();
        assert!(lg.loss < 1e-9, "loss {}", lg.loss);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = stream_rng(21, 0);
        for _ in 0..10 {
            let (params, features, labels) = random_setup(&mut rng, 4, 3, 6);
            let lg = ce_loss_grad(&params, features.view(), &labels).unwrap();
            let fd = finite_diff(
                &params,
                |p| ce_loss_grad(p, features.view(), &labels).unwrap().loss,
                1e-4,
            );
            assert!(max_rel_err(&lg.grad, &fd) < 1e-5);
        }
    }

    #[test]
    fn ce_rejects_empty_batch() {
        let params = ModelParams::zeros(2, 2, 1.0).unwrap();
        let x = Array2::<f64>::zeros((0, 2));
        assert!(ce_loss_grad(&params, x.view(), &[]).is_err());
    }

    #[test]
    fn kl_self_distillation_is_zero() {
        let mut rng = stream_rng(22, 0);
        let (params, features, _) = random_setup(&mut rng, 3, 4, 5);
        let own = predict_probs(&params, features.view()).unwrap();
        let lg = kl_distill_loss_grad(&params, own.view(), features.view()).unwrap();
        assert!(lg.loss.abs() < 1e-12);
        assert!(lg.grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_uniform_teacher_uniform_student() {
        let params = ModelParams::zeros(4, 3, 1.0).unwrap();
        let teacher = Array2::from_elem((2, 4), 0.25);
        let x = Array2::zeros((2, 3));
        let lg = kl_distill_loss_grad(&params, teacher.view(), x.view()).unwrap();
        assert!(lg.loss.abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = stream_rng(23, 0);
        for _ in 0..10 {
            let (params, features, _) = random_setup(&mut rng, 4, 3, 6);
            let (teacher_params, _, _) = random_setup(&mut rng, 4, 3, 6);
            let teacher = predict_probs(&teacher_params, features.view()).unwrap();
            let lg = kl_distill_loss_grad(&params, teacher.view(), features.view()).unwrap();
            let fd = finite_diff(
                &params,
                |p| {
                    kl_distill_loss_grad(p, teacher.view(), features.view())
                        .unwrap()
                        .loss
                },
                1e-4,
            );
            assert!(max_rel_err(&lg.grad, &fd) < 1e-5);
        }
    }

    #[test]
    fn kl_rejects_off_simplex_teacher() {
        let params = ModelParams::zeros(3, 2, 1.0).unwrap();
        let teacher = array![[0.5, 0.2, 0.2]]; // sums to 0.9
        let x = Array2::zeros((1, 2));
        assert!(kl_distill_loss_grad(&params, teacher.view(), x.view()).is_err());
    }

    #[test]
    fn sgd_zero_grad_and_zero_lr_are_fixed_points() {
        let mut params = ModelParams::zeros(2, 2, 1.0).unwrap();
        params.weights[(0, 0)] = 1.5;
        let mut opt = SgdOptimizer::new(params.flat_len(), 0.9).unwrap();
        let before = params.clone();
        let zero_grad = Array1::zeros(params.flat_len());
        opt.step(&mut params, zero_grad.view(), 0.1).unwrap();
        assert_eq!(params, before);

        let grad = Array1::from_elem(params.flat_len(), 0.3);
        opt.step(&mut params, grad.view(), 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_momentum_doubles_second_displacement() {
        // With constant gradient g: step 1 moves by η·g, step 2 by 1.9·η·g.
        let mut params = ModelParams::zeros(2, 2, 1.0).unwrap();
        let mut opt = SgdOptimizer::new(params.flat_len(), 0.9).unwrap();
        let grad = Array1::from_elem(params.flat_len(), 1.0);
        opt.step(&mut params, grad.view(), 0.1).unwrap();
        let first = params.weights[(0, 0)];
        assert_abs_diff_eq!(first, -0.1, epsilon = 1e-15);
        opt.step(&mut params, grad.view(), 0.1).unwrap();
        let second = params.weights[(0, 0)] - first;
        assert_abs_diff_eq!(second, 1.9 * -0.1, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_perfect_fit_is_one() {
        let mut params = ModelParams::zeros(2, 2, 1.0).unwrap();
        params.weights[(0, 0)] = 1.0;
        params.weights[(1, 1)] = 1.0;
        let x = array![[3.0, 0.0], [0.0, 3.0], [5.0, 1.0]];
        assert_eq!(evaluate(&params, x.view(), &[0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_tie_breaks_to_lowest_class() {
        let params = ModelParams::zeros(3, 2, 1.0).unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        // All logits zero, so every prediction is class 0.
        let acc = evaluate(&params, x.view(), &[0, 1, 2]).unwrap();
        assert_abs_diff_eq!(acc, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let mut rng = stream_rng(31, 0);
        let (params, features, labels) = random_setup(&mut rng, 3, 4, 9);
        let acc = evaluate(&params, features.view(), &labels).unwrap();
        let perm: Vec<usize> = (0..9).rev().collect();
        let shuffled = features.select(ndarray::Axis(0), &perm);
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let acc2 = evaluate(&params, shuffled.view(), &shuffled_labels).unwrap();
        assert_eq!(acc, acc2);
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut rng = stream_rng(32, 0);
        let (params, _, _) = random_setup(&mut rng, 3, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        params.save_checkpoint(&path).unwrap();
        let loaded = ModelParams::load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
