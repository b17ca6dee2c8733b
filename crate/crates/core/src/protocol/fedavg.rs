//! Centralized federated averaging baseline.
//!
//! One global model; each round every participant takes one local epoch of
//! SGD from the current global parameters and the server averages the
//! results weighted by training-set size. The round budget is
//! `warmup_epochs + rounds` so the total number of local epochs matches the
//! decentralized modes.

use ndarray::Array1;
use rand::seq::SliceRandom;

use crate::data::{DataPartition, Dataset};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams, SgdOptimizer};
use crate::numerics::{stream_rng, streams};

use super::engine::ProtocolRun;
use super::{Mode, ProtocolConfig};

/// Weighted mean of parameter sets; weights need not be normalized.
pub fn fedavg_aggregate(params: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if params.is_empty() {
        return Err(Error::param("params", "nothing to aggregate"));
    }
    if params.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} parameter sets vs {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::param("weights", "weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::param("weights", "weights must not all be zero"));
    }
    let first = &params[0];
    let mut flat = Array1::<f64>::zeros(first.flat_len());
    for (p, &w) in params.iter().zip(weights.iter()) {
        if p.num_classes() != first.num_classes() || p.dim() != first.dim() {
            return Err(Error::dim("parameter sets have mismatched shapes"));
        }
        flat.scaled_add(w / total, &p.to_flat());
    }
    ModelParams::from_flat(
        flat.view(),
        first.num_classes(),
        first.dim(),
        first.temperature,
    )
}

/// Run federated averaging over the partition.
pub fn run_fedavg(
    dataset: &Dataset,
    partition: &DataPartition,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<ProtocolRun> {
    config.validate()?;
    let n = partition.num_participants();
    if n == 0 {
        return Err(Error::param("partition", "need at least one participant"));
    }
    let rounds_total = config.warmup_epochs + config.rounds;

    struct Client {
        train_features: ndarray::Array2<f64>,
        train_labels: Vec<usize>,
        holdout_features: ndarray::Array2<f64>,
        holdout_labels: Vec<usize>,
        order: Vec<usize>,
        rng: crate::numerics::StreamRng,
    }

    let mut clients = Vec::with_capacity(n);
    for id in 0..n {
        let (train_features, train_labels) = partition.train_set(dataset, id);
        let (holdout_features, holdout_labels) = partition.holdout_set(dataset, id);
        if train_labels.is_empty() || holdout_labels.is_empty() {
            return Err(Error::param(
                "partition",
                format!("participant {id} has an empty train or holdout set"),
            ));
        }
        let order: Vec<usize> = (0..train_labels.len()).collect();
        clients.push(Client {
            train_features,
            train_labels,
            holdout_features,
            holdout_labels,
            order,
            rng: stream_rng(seed, streams::TRAIN_BASE + id as u64),
        });
    }

    let weights: Vec<f64> = clients
        .iter()
        .map(|c| c.train_labels.len() as f64)
        .collect();
    let mut global = ModelParams::zeros(
        dataset.num_classes(),
        dataset.dim(),
        config.distill_temperature,
    )?;
    let mut trajectory: Vec<Vec<f64>> = vec![Vec::with_capacity(rounds_total); n];

    for t in 0..rounds_total {
        let lr = config.lr_at(t);
        let mut locals = Vec::with_capacity(n);
        for client in clients.iter_mut() {
            let mut local = global.clone();
            // Fresh optimizer state: momentum does not carry across the
            // parameter replacement at each aggregation.
            let mut opt = SgdOptimizer::new(local.flat_len(), config.momentum)?;
            let len = client.train_labels.len();
            let batch = config.batch_size.unwrap_or(len).min(len);
            client.order.shuffle(&mut client.rng);
            let mut pos = 0;
            while pos < len {
                let end = (pos + batch).min(len);
                let positions = &client.order[pos..end];
                let mut bf = ndarray::Array2::zeros((positions.len(), dataset.dim()));
                let mut bl = Vec::with_capacity(positions.len());
                for (row, &p) in positions.iter().enumerate() {
                    bf.row_mut(row).assign(&client.train_features.row(p));
                    bl.push(client.train_labels[p]);
                }
                let ce = models::ce_loss_grad(&local, bf.view(), &bl)?;
                opt.step(&mut local, ce.grad.view(), lr)?;
                pos = end;
            }
            locals.push(local);
        }
        global = fedavg_aggregate(&locals, &weights)?;
        for (i, client) in clients.iter().enumerate() {
            let acc = models::evaluate(
                &global,
                client.holdout_features.view(),
                &client.holdout_labels,
            )?;
            trajectory[i].push(acc);
        }
    }

    let final_accuracy = trajectory
        .iter()
        .map(|t| *t.last().expect("rounds >= 1"))
        .collect();
    Ok(ProtocolRun {
        mode: Mode::Fedavg,
        final_accuracy,
        trajectory,
        snapshots: Vec::new(),
        final_params: vec![global; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, split_homogeneous};
    use approx::assert_abs_diff_eq;

    fn params_with(value: f64) -> ModelParams {
        let mut p = ModelParams::zeros(2, 2, 1.0).unwrap();
        p.weights.fill(value);
        p.bias.fill(value);
        p
    }

    #[test]
    fn aggregate_weighted_mean() {
        let agg = fedavg_aggregate(&[params_with(1.0), params_with(2.0)], &[3.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            agg.weights[(0, 0)],
            0.75 * 1.0 + 0.25 * 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn aggregate_identical_params_is_identity() {
        let p = params_with(0.7);
        let agg = fedavg_aggregate(&[p.clone(), p.clone(), p.clone()], &[1.0, 5.0, 2.0]).unwrap();
        for (a, b) in agg.to_flat().iter().zip(p.to_flat().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(fedavg_aggregate(&[], &[]).is_err());
        assert!(fedavg_aggregate(&[params_with(1.0)], &[1.0, 2.0]).is_err());
        assert!(fedavg_aggregate(&[params_with(1.0)], &[0.0]).is_err());
        assert!(fedavg_aggregate(&[params_with(1.0)], &[-1.0]).is_err());
    }

    #[test]
    fn single_participant_fedavg_is_local_training() {
        let mut rng = stream_rng(2, streams::DATASET);
        let dataset = make_blobs(3, 4, 40, 0.8, &mut rng).unwrap();
        let mut rng = stream_rng(2, streams::PARTITION);
        let partition = split_homogeneous(&dataset, 1, 0.2, &mut rng).unwrap();
        let config = ProtocolConfig {
            rounds: 5,
            warmup_epochs: 2,
            ..ProtocolConfig::default()
        };
        let run = run_fedavg(&dataset, &partition, &config, 2).unwrap();

        // The same schedule by hand: aggregation with one client is identity.
        let (tf, tl) = partition.train_set(&dataset, 0);
        let mut params = ModelParams::zeros(3, 4, 1.0).unwrap();
        let mut order: Vec<usize> = (0..tl.len()).collect();
        let mut rng = stream_rng(2, streams::TRAIN_BASE);
        for t in 0..7 {
            let mut opt = SgdOptimizer::new(params.flat_len(), config.momentum).unwrap();
            order.shuffle(&mut rng);
            let mut bf = ndarray::Array2::zeros((tl.len(), 4));
            let mut bl = Vec::new();
            for (row, &p) in order.iter().enumerate() {
                bf.row_mut(row).assign(&tf.row(p));
                bl.push(tl[p]);
            }
            let ce = models::ce_loss_grad(&params, bf.view(), &bl).unwrap();
            opt.step(&mut params, ce.grad.view(), config.lr_at(t))
                .unwrap();
        }
        assert_eq!(run.final_params[0], params);
    }
}
