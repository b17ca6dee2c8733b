//! Dataset construction, CSV ingestion, participant partitioning, and label
//! corruption.
//!
//! A [`Dataset`] is immutable once built. Partitions index into it; corrupted
//! labels live as per-participant overrides inside the partition so the parent
//! dataset is never mutated.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sample_dirichlet, StreamRng};

/// Feature matrix plus integer labels in `{0..num_classes-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::param(
                "labels",
                "dataset must have at least one sample",
            ));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::param(
                "labels",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(
                "features",
                "all feature values must be finite",
            ));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Materialize the rows at `indices`, with labels taken from `overrides`
    /// where present.
    fn gather(
        &self,
        indices: &[usize],
        overrides: &BTreeMap<usize, usize>,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut feats = Array2::zeros((indices.len(), self.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            feats.row_mut(row).assign(&self.features.row(idx));
            labels.push(*overrides.get(&idx).unwrap_or(&self.labels[idx]));
        }
        (feats, labels)
    }
}

/// One participant's slice of the parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantShare {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    /// Corrupted training labels: sample index → replacement label.
    label_overrides: BTreeMap<usize, usize>,
}

/// Per-participant train/holdout index sets over one dataset.
///
/// Train sets are disjoint across participants; within a participant, train
/// and holdout are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    shares: Vec<ParticipantShare>,
}

impl DataPartition {
    pub fn num_participants(&self) -> usize {
        self.shares.len()
    }

    pub fn share(&self, participant: usize) -> &ParticipantShare {
        &self.shares[participant]
    }

    /// Training rows and labels (with any corruption applied).
    pub fn train_set(&self, dataset: &Dataset, participant: usize) -> (Array2<f64>, Vec<usize>) {
        let share = &self.shares[participant];
        dataset.gather(&share.train, &share.label_overrides)
    }

    /// Holdout rows and clean labels.
    pub fn holdout_set(&self, dataset: &Dataset, participant: usize) -> (Array2<f64>, Vec<usize>) {
        let share = &self.shares[participant];
        dataset.gather(&share.holdout, &BTreeMap::new())
    }

    /// Effective training label for one sample of one participant.
    pub fn effective_label(&self, dataset: &Dataset, participant: usize, index: usize) -> usize {
        *self.shares[participant]
            .label_overrides
            .get(&index)
            .unwrap_or(&dataset.labels[index])
    }

    /// Append a share verbatim; engine tests use this to build degenerate
    /// layouts (e.g. two participants over the same samples).
    #[doc(hidden)]
    pub fn push_share_for_tests(&mut self, share: ParticipantShare) {
        self.shares.push(share);
    }

    /// Check the structural invariants against the parent dataset.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen_train = vec![false; dataset.len()];
        for (n, share) in self.shares.iter().enumerate() {
            let mut own = vec![false; dataset.len()];
            for &i in share.train.iter().chain(share.holdout.iter()) {
                if i >= dataset.len() {
                    return Err(Error::param("partition", format!("index {i} out of range")));
                }
                if own[i] {
                    return Err(Error::param(
                        "partition",
                        format!("participant {n} holds sample {i} twice"),
                    ));
                }
                own[i] = true;
            }
            for &i in &share.train {
                if seen_train[i] {
                    return Err(Error::param(
                        "partition",
                        format!("sample {i} appears in two train sets"),
                    ));
                }
                seen_train[i] = true;
            }
        }
        Ok(())
    }
}

fn check_holdout_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(
            "holdout_fraction",
            format!("must be in (0, 1), got {fraction}"),
        ));
    }
    Ok(())
}

/// Split an allocation into train/holdout, stratified by class.
///
/// Per class the last `floor(fraction · count)` samples go to the holdout; if
/// every class is too small to contribute, one sample is still held out so the
/// holdout is never empty.
fn carve_holdout(dataset: &Dataset, allocation: &[usize], fraction: f64) -> ParticipantShare {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in allocation {
        by_class.entry(dataset.labels[i]).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for idxs in by_class.values() {
        let take = (fraction * idxs.len() as f64).floor() as usize;
        let cut = idxs.len() - take;
        train.extend_from_slice(&idxs[..cut]);
        holdout.extend_from_slice(&idxs[cut..]);
    }
    if holdout.is_empty() && train.len() >= 2 {
        holdout.push(train.pop().expect("nonempty"));
    }
    train.sort_unstable();
    holdout.sort_unstable();
    ParticipantShare {
        train,
        holdout,
        label_overrides: BTreeMap::new(),
    }
}

/// Synthetic Gaussian blobs: one isotropic cluster per class.
///
/// Class centers sit on coordinate axes at multiples of `4 · spread`, so any
/// two centers are at least `4 · spread` apart and the classes are linearly
/// separable at desk scale.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    rng: &mut StreamRng,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::param("num_classes", "need at least 2 classes"));
    }
    if dim < 2 {
        return Err(Error::param("dim", "need at least 2 dimensions"));
    }
    if samples_per_class < 2 {
        return Err(Error::param(
            "samples_per_class",
            "need at least 2 per class",
        ));
    }
    if !(spread > 0.0) {
        return Err(Error::param(
            "spread",
            format!("must be positive, got {spread}"),
        ));
    }
    let total = num_classes * samples_per_class;
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let normal = rand_distr::StandardNormal;
    for class in 0..num_classes {
        let axis = class % dim;
        let ring = (class / dim + 1) as f64;
        for s in 0..samples_per_class {
            let row = class * samples_per_class + s;
            for j in 0..dim {
                let noise: f64 = rng.sample(normal);
                let center = if j == axis { 4.0 * spread * ring } else { 0.0 };
                features[(row, j)] = center + spread * noise;
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Load a dataset from CSV: `d` float columns then one integer label column.
///
/// Accepts LF or CRLF endings and an optional single header row.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, reason: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    let mut header_pending = has_header;
    for (line_no, raw) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(csv_err(
                line_no,
                format!("expected at least 2 columns, found {}", cells.len()),
            ));
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(csv_err(
                    line_no,
                    format!("expected {w} columns, found {}", cells.len()),
                ))
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(cells.len() - 1);
        for cell in &cells[..cells.len() - 1] {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line_no, format!("cannot parse `{cell}` as a number")))?;
            if !v.is_finite() {
                return Err(csv_err(
                    line_no,
                    format!("non-finite feature value `{cell}`"),
                ));
            }
            row.push(v);
        }
        let label_cell = cells[cells.len() - 1];
        let label: i64 = label_cell.parse().map_err(|_| {
            csv_err(
                line_no,
                format!("cannot parse `{label_cell}` as an integer label"),
            )
        })?;
        if label < 0 {
            return Err(csv_err(line_no, format!("negative label {label}")));
        }
        rows.push(row);
        labels.push(label as usize);
    }
    if rows.is_empty() {
        return Err(csv_err(0, "no data rows".to_string()));
    }
    let dim = width.expect("rows nonempty") - 1;
    let mut features = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        features.row_mut(i).assign(&Array1::from_vec(row.clone()));
    }
    let num_classes = labels.iter().max().expect("nonempty") + 1;
    Dataset::new(features, labels, num_classes)
}

/// Write a dataset in the format accepted by [`load_csv`].
///
/// Floats use the shortest round-trip representation, so save → load is exact.
pub fn save_csv(dataset: &Dataset, path: &Path, write_header: bool) -> Result<()> {
    let mut out = String::new();
    if write_header {
        for j in 0..dataset.dim() {
            out.push_str(&format!("f{j},"));
        }
        out.push_str("label\n");
    }
    for i in 0..dataset.len() {
        for j in 0..dataset.dim() {
            out.push_str(&format!("{},", dataset.features[(i, j)]));
        }
        out.push_str(&format!("{}\n", dataset.labels[i]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Equal per-class allocation: every participant gets the same number of
/// samples from each class, up to a remainder of 1.
pub fn split_homogeneous(
    dataset: &Dataset,
    participants: usize,
    holdout_fraction: f64,
    rng: &mut StreamRng,
) -> Result<DataPartition> {
    if participants == 0 {
        return Err(Error::param("participants", "need at least 1 participant"));
    }
    check_holdout_fraction(holdout_fraction)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for (&class, idxs) in &by_class {
        if idxs.len() < participants {
            return Err(Error::param(
                "participants",
                format!(
                    "class {class} has {} samples, fewer than {participants} participants",
                    idxs.len()
                ),
            ));
        }
    }
    let mut allocations: Vec<Vec<usize>> = vec![Vec::new(); participants];
    for idxs in by_class.values_mut() {
        idxs.shuffle(rng);
        let base = idxs.len() / participants;
        let extra = idxs.len() % participants;
        let mut cursor = 0;
        for (p, alloc) in allocations.iter_mut().enumerate() {
            let take = base + usize::from(p < extra);
            alloc.extend_from_slice(&idxs[cursor..cursor + take]);
            cursor += take;
        }
    }
    let shares = allocations
        .iter()
        .map(|alloc| carve_holdout(dataset, alloc, holdout_fraction))
        .collect();
    Ok(DataPartition { shares })
}

/// Size-skewed allocation: participant `n` receives a fraction `p_n` of all
/// samples with `p ~ Dirichlet(delta)`.
///
/// Every participant must end up with at least `2 · num_classes` samples;
/// the draw is retried up to 100 times before giving up.
// TODO: per-class label-skew variant (draw p per class) behind a flag.
pub fn split_dirichlet(
    dataset: &Dataset,
    participants: usize,
    delta: f64,
    holdout_fraction: f64,
    rng: &mut StreamRng,
) -> Result<DataPartition> {
    if participants == 0 {
        return Err(Error::param("participants", "need at least 1 participant"));
    }
    check_holdout_fraction(holdout_fraction)?;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(rng);
    if participants == 1 {
        return Ok(DataPartition {
            shares: vec![carve_holdout(dataset, &indices, holdout_fraction)],
        });
    }

    let min_samples = 2 * dataset.num_classes();
    let total = dataset.len();
    for _ in 0..100 {
        let p = sample_dirichlet(delta, participants, rng)?;
        let sizes = proportional_sizes(&p.to_vec(), total);
        if sizes.iter().all(|&s| s >= min_samples) {
            let mut shares = Vec::with_capacity(participants);
            let mut cursor = 0;
            for &size in &sizes {
                let alloc = &indices[cursor..cursor + size];
                shares.push(carve_holdout(dataset, alloc, holdout_fraction));
                cursor += size;
            }
            return Ok(DataPartition { shares });
        }
    }
    Err(Error::param(
        "delta",
        format!(
            "resampling budget exhausted: no draw gave every participant {min_samples}+ samples"
        ),
    ))
}

/// Whole-sample block sizes from a probability vector via cumulative
/// rounding; sizes always sum to `total`.
fn proportional_sizes(probs: &[f64], total: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(probs.len());
    let mut cum = 0.0;
    let mut prev = 0usize;
    for &p in probs {
        cum += p;
        let here = (cum * total as f64).round().min(total as f64) as usize;
        sizes.push(here - prev);
        prev = here;
    }
    if let Some(last) = sizes.last_mut() {
        *last += total - prev;
    }
    sizes
}

/// Imbalanced allocation: each of the first `m` participants receives a
/// `kappa` fraction of all samples; the rest split the remainder evenly, with
/// leftover samples going to the last participant.
pub fn split_imbalanced(
    dataset: &Dataset,
    participants: usize,
    kappa: f64,
    m: usize,
    holdout_fraction: f64,
    rng: &mut StreamRng,
) -> Result<DataPartition> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::param(
            "kappa",
            format!("must be in (0, 1), got {kappa}"),
        ));
    }
    if m == 0 || m >= participants {
        return Err(Error::param(
            "m",
            format!("need 1 <= m < participants, got m={m}, participants={participants}"),
        ));
    }
    if m as f64 * kappa >= 1.0 {
        return Err(Error::param(
            "kappa",
            format!("m·kappa = {} must be below 1", m as f64 * kappa),
        ));
    }
    check_holdout_fraction(holdout_fraction)?;

    let total = dataset.len();
    let big = (kappa * total as f64).floor() as usize;
    let rest = total - m * big;
    let small = rest / (participants - m);
    let mut sizes = vec![big; m];
    sizes.extend(vec![small; participants - m]);
    *sizes.last_mut().expect("nonempty") += rest - small * (participants - m);
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::param(
            "kappa",
            "allocation leaves a participant with fewer than 2 samples",
        ));
    }

    let mut indices: Vec<usize> = (0..total).collect();
    indices.shuffle(rng);
    let mut shares = Vec::with_capacity(participants);
    let mut cursor = 0;
    for &size in &sizes {
        shares.push(carve_holdout(
            dataset,
            &indices[cursor..cursor + size],
            holdout_fraction,
        ));
        cursor += size;
    }
    Ok(DataPartition { shares })
}

/// Corrupt one participant's training labels.
///
/// Exactly `floor(flip_rate · |train|)` labels change, each to a uniformly
/// random class different from its current one. Holdout labels are untouched.
pub fn flip_labels(
    dataset: &Dataset,
    partition: &DataPartition,
    participant: usize,
    flip_rate: f64,
    rng: &mut StreamRng,
) -> Result<DataPartition> {
    if participant >= partition.num_participants() {
        return Err(Error::param(
            "participant",
            format!(
                "index {participant} out of range for {} participants",
                partition.num_participants()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::param(
            "flip_rate",
            format!("must be in [0, 1], got {flip_rate}"),
        ));
    }
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(Error::param(
            "dataset",
            "cannot flip labels with fewer than 2 classes",
        ));
    }
    let mut out = partition.clone();
    let share = &mut out.shares[participant];
    let count = (flip_rate * share.train.len() as f64).floor() as usize;
    let chosen = rand::seq::index::sample(rng, share.train.len(), count);
    let mut positions: Vec<usize> = chosen.into_iter().collect();
    positions.sort_unstable();
    for pos in positions {
        let idx = share.train[pos];
        let current = *share
            .label_overrides
            .get(&idx)
            .unwrap_or(&dataset.labels[idx]);
        let draw = rng.random_range(0..classes - 1);
        let flipped = if draw >= current { draw + 1 } else { draw };
        share.label_overrides.insert(idx, flipped);
    }
    Ok(out)
}
