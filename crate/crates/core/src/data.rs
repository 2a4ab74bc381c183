//! Synthetic open-set data: Gaussian blobs, known/unknown splits, batching
//! and feature jitter.
//!
//! Labels are 1-based. Rows of unknown classes carry [`UNKNOWN`] (0).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::UNKNOWN;

/// Half-width of the box blob centers are drawn from.
pub const CENTER_BOX: f64 = 4.0;

/// Resampling bound for batches that come out single-class.
pub const MAX_BATCH_RETRIES: usize = 64;

/// Labeled feature matrix.
///
/// Labels lie in `1..=class_count`, or are all [`UNKNOWN`] with
/// `class_count == 0` for a held-out unknown set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if class_count == 0 {
            if labels.iter().any(|&l| l != UNKNOWN) {
                return Err(Error::invalid("class_count 0 requires all labels UNKNOWN"));
            }
        } else if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > class_count) {
            return Err(Error::invalid(format!(
                "label {bad} outside 1..={class_count}"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    /// A set of rows from unknown classes.
    pub fn unknown(features: Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        Self::new(features, vec![UNKNOWN; n], 0)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
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

    /// Row counts per class, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            if l != UNKNOWN {
                counts[l - 1] += 1;
            }
        }
        counts
    }

    fn select(&self, rows: &[usize], relabel: impl Fn(usize) -> usize, class_count: usize) -> Result<Self> {
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| relabel(self.labels[r])).collect();
        Self::new(features, labels, class_count)
    }

    /// Writes `f0,...,f{d-1},label` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        self.write_csv_to(BufWriter::new(file))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for (row, &label) in self.features.outer_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. A file whose labels are
    /// all 0 is read as an unknown set; otherwise `class_count` is the
    /// largest label.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_csv_from(BufReader::new(file)).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn read_csv_from<R: Read>(reader: R) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: "<reader>".into(),
            detail,
        };
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
        let dim = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| fmt("no feature columns".into()))?;
        if header.get(dim) != Some("label") {
            return Err(fmt("last column must be `label`".into()));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            if rec.len() != dim + 1 {
                return Err(fmt(format!("row {} has {} fields", line + 1, rec.len())));
            }
            for field in rec.iter().take(dim) {
                values.push(field.trim().parse::<f64>().map_err(|e| fmt(format!("row {}: {e}", line + 1)))?);
            }
            labels.push(rec[dim].trim().parse::<usize>().map_err(|e| fmt(format!("row {}: {e}", line + 1)))?);
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, dim), values).map_err(|e| fmt(e.to_string()))?;
        let class_count = labels.iter().copied().max().unwrap_or(0);
        Self::new(features, labels, class_count)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            path: "<writer>".into(),
            detail: format!("{other:?}"),
        },
    }
}

/// Class centers used by [`generate_blobs`] for `(class_count, dim, seed)`.
pub fn blob_centers(class_count: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, Stream::Data, 0);
    let uniform = Uniform::new_inclusive(-CENTER_BOX, CENTER_BOX).expect("finite bounds");
    Array2::from_shape_simple_fn((class_count, dim), || uniform.sample(&mut rng))
}

/// Isotropic Gaussian blobs, `per_class` rows per class, class-major order.
pub fn generate_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::invalid("class_count must be at least 2"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class must be at least 1"));
    }
    if dim < 2 {
        return Err(Error::invalid("dim must be at least 2"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let centers = blob_centers(class_count, dim, seed);
    let mut rng = rng::stream(seed, Stream::Data, 1);
    let n = class_count * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (r, mut row) in features.outer_iter_mut().enumerate() {
        let class = r / per_class;
        for (x, &c) in row.iter_mut().zip(centers.row(class)) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = c + spread * noise;
        }
        labels.push(class + 1);
    }
    Dataset::new(features, labels, class_count)
}

/// Known/unknown partition of a labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSplit {
    /// Known classes relabeled `1..=K`.
    pub train: Dataset,
    /// Held-out rows of the known classes, same relabeling as `train`.
    pub test_known: Dataset,
    /// All rows of the remaining classes, labeled [`UNKNOWN`].
    pub test_unknown: Dataset,
    /// Original ids of the known classes; `known_ids[k - 1]` became label `k`.
    pub known_ids: Vec<usize>,
    pub unknown_ids: Vec<usize>,
}

impl OpenSplit {
    pub fn known_classes(&self) -> usize {
        self.known_ids.len()
    }
}

/// Picks `known` of `class_count` ids at random, returned sorted.
pub fn choose_known_ids(class_count: usize, known: usize, seed: u64) -> Result<Vec<usize>> {
    if known == 0 || known >= class_count {
        return Err(Error::invalid(format!(
            "need 0 < known ({known}) < class_count ({class_count})"
        )));
    }
    let mut rng = rng::stream(seed, Stream::KnownSelection, 0);
    let mut ids: Vec<usize> = sample(&mut rng, class_count, known)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Splits `ds` into train/test over `known_ids` and an unknown test set.
///
/// Per known class, `floor(n_c * test_fraction)` randomly chosen rows go to
/// `test_known` and the rest to `train`. Row order within each output follows
/// the input order.
pub fn split_open_set(ds: &Dataset, known_ids: &[usize], test_fraction: f64, seed: u64) -> Result<OpenSplit> {
    let classes = ds.class_count();
    let known: BTreeSet<usize> = known_ids.iter().copied().collect();
    if known.is_empty() {
        return Err(Error::invalid("known_ids is empty"));
    }
    if known.len() != known_ids.len() {
        return Err(Error::invalid("known_ids contains duplicates"));
    }
    if let Some(&bad) = known.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::invalid(format!("known id {bad} outside 1..={classes}")));
    }
    if known.len() == classes {
        return Err(Error::invalid("known_ids covers every class; nothing left unknown"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }

    let known_ids: Vec<usize> = known.iter().copied().collect();
    let unknown_ids: Vec<usize> = (1..=classes).filter(|c| !known.contains(c)).collect();
    let mut remap = vec![UNKNOWN; classes + 1];
    for (k, &id) in known_ids.iter().enumerate() {
        remap[id] = k + 1;
    }

    let mut rng = rng::stream(seed, Stream::Split, 0);
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for &id in &known_ids {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels[r] == id).collect();
        rows.shuffle(&mut rng);
        let n_test = (rows.len() as f64 * test_fraction).floor() as usize;
        test_rows.extend_from_slice(&rows[..n_test]);
        train_rows.extend_from_slice(&rows[n_test..]);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    let unknown_rows: Vec<usize> = (0..ds.len()).filter(|&r| remap[ds.labels[r]] == UNKNOWN).collect();

    let k = known_ids.len();
    Ok(OpenSplit {
        train: ds.select(&train_rows, |l| remap[l], k)?,
        test_known: ds.select(&test_rows, |l| remap[l], k)?,
        test_unknown: ds.select(&unknown_rows, |_| UNKNOWN, 0)?,
        known_ids,
        unknown_ids,
    })
}

/// A training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Sorted distinct labels of the batch.
    pub present_classes: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid("batch feature rows and labels differ in length"));
        }
        let present_classes = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self {
            features,
            labels,
            present_classes,
        })
    }

    fn from_rows(ds: &Dataset, rows: &[usize]) -> Self {
        Self::new(
            ds.features.select(Axis(0), rows),
            rows.iter().map(|&r| ds.labels[r]).collect(),
        )
        .expect("rows come from a consistent dataset")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `K_B`, the number of distinct classes present.
    pub fn class_count(&self) -> usize {
        self.present_classes.len()
    }

    /// Stacks `other` below `self` (used for the optional two-view mode).
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Batch::new(features, labels)
    }
}

/// Draws `batch_size` rows without replacement, redrawing up to
/// [`MAX_BATCH_RETRIES`] times until at least two classes are present.
pub fn sample_batch(train: &Dataset, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    if batch_size < 2 || batch_size > train.len() {
        return Err(Error::invalid(format!(
            "batch_size {batch_size} must lie in 2..={}",
            train.len()
        )));
    }
    for _ in 0..MAX_BATCH_RETRIES {
        let rows = sample(rng, train.len(), batch_size).into_vec();
        let batch = Batch::from_rows(train, &rows);
        if batch.class_count() >= 2 {
            return Ok(batch);
        }
    }
    Err(Error::UnsatisfiableBatch {
        retries: MAX_BATCH_RETRIES,
    })
}

/// Partitions one shuffled pass over `train` into batches.
///
/// Every row appears in exactly one batch. A trailing chunk smaller than two
/// rows is folded into the previous batch. If any chunk is single-class the
/// whole permutation is redrawn, up to [`MAX_BATCH_RETRIES`] times.
pub fn epoch_batches(train: &Dataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    let n = train.len();
    if n < 2 {
        return Err(Error::invalid("need at least two training rows"));
    }
    let size = batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..MAX_BATCH_RETRIES {
        order.shuffle(rng);
        let mut chunks: Vec<&[usize]> = order.chunks(size).collect();
        if chunks.len() > 1 && chunks[chunks.len() - 1].len() < 2 {
            chunks.pop();
            let start = (chunks.len() - 1) * size;
            let last = chunks.len() - 1;
            chunks[last] = &order[start..];
        }
        let batches: Vec<Batch> = chunks.iter().map(|rows| Batch::from_rows(train, rows)).collect();
        if batches.iter().all(|b| b.class_count() >= 2) {
            return Ok(batches);
        }
    }
    Err(Error::UnsatisfiableBatch {
        retries: MAX_BATCH_RETRIES,
    })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every feature. `sigma == 0` returns
/// an exact copy.
pub fn augment_gaussian(batch: &Batch, sigma: f64, rng: &mut Rng) -> Result<Batch> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    out.features.mapv_inplace(|x| {
        let noise: f64 = rng.sample(StandardNormal);
        x + sigma * noise
    });
    Ok(out)
}
