//! Percentile rejection thresholds and the open-set decision rule.
//!
//! Thresholds are fitted on training posteriors: for class `i`, `eps_i` is the
//! `percentile`-th percentile (linear interpolation between closest ranks,
//! inclusive endpoints) of the max-posterior confidences of training rows of
//! class `i`. A test row is assigned its argmax class `k` when its confidence
//! reaches `eps_k`, and [`UNKNOWN`] otherwise.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::UNKNOWN;

pub const DEFAULT_PERCENTILE: f64 = 5.0;

/// Tolerance on posterior row sums.
pub const POSTERIOR_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    PerClass,
    /// One threshold over all classes.
    Global,
}

/// Which training rows feed the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRows {
    /// Only rows whose argmax equals their label.
    Correct,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// `thresholds[i - 1]` is the threshold of class `i`.
    pub thresholds: Vec<f64>,
    pub percentile: f64,
}

impl ThresholdTable {
    pub fn for_class(&self, class: usize) -> f64 {
        self.thresholds[class - 1]
    }

    /// `# percentile=<p>` followed by `class,threshold` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# percentile={}", self.percentile)?;
        writeln!(w, "class,threshold")?;
        for (i, t) in self.thresholds.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenPrediction {
    /// Known class `1..=K` or [`UNKNOWN`].
    pub label: usize,
    /// Max posterior.
    pub confidence: f64,
    /// Argmax class, whether or not it was accepted.
    pub argmax: usize,
}

/// Linear-interpolation percentile of `values` (need not be sorted).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Argmax (smallest index on ties) as a 1-based class, and the max value.
pub fn argmax(row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    (best + 1, row[best])
}

fn check_posterior(row: ArrayView1<f64>) -> Result<()> {
    let sum: f64 = row.sum();
    if !(sum - 1.0).abs().le(&POSTERIOR_SUM_TOL) || row.iter().any(|v| !(0.0..=1.0 + POSTERIOR_SUM_TOL).contains(v)) {
        return Err(Error::invalid(format!("posterior does not sum to 1 (sum {sum})")));
    }
    Ok(())
}

/// Fits per-class thresholds from training posteriors.
///
/// A class with no qualifying rows falls back to the percentile over all
/// qualifying rows (or over every row when none qualify). In
/// [`ThresholdMode::Global`] every class gets that pooled value.
pub fn fit_thresholds(
    posteriors: &Array2<f64>,
    labels: &[usize],
    pct: f64,
    mode: ThresholdMode,
    rows: ThresholdRows,
) -> Result<ThresholdTable> {
    let k = posteriors.ncols();
    if k == 0 {
        return Err(Error::invalid("no classes to fit thresholds for"));
    }
    if posteriors.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("need one label per posterior row, and at least one row"));
    }
    if !(pct > 0.0 && pct < 100.0) {
        return Err(Error::invalid(format!("percentile must lie in (0, 100), got {pct}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::invalid(format!("label {bad} outside 1..={k}")));
    }

    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut pooled = Vec::new();
    let mut everything = Vec::new();
    for (row, &y) in posteriors.outer_iter().zip(labels) {
        check_posterior(row)?;
        let (pred, conf) = argmax(row);
        everything.push(conf);
        if rows == ThresholdRows::All || pred == y {
            per_class[y - 1].push(conf);
            pooled.push(conf);
        }
    }
    let global = if pooled.is_empty() {
        percentile(&everything, pct)
    } else {
        percentile(&pooled, pct)
    };
    let thresholds = per_class
        .iter()
        .map(|c| match mode {
            ThresholdMode::PerClass if !c.is_empty() => percentile(c, pct),
            _ => global,
        })
        .collect();
    Ok(ThresholdTable {
        thresholds,
        percentile: pct,
    })
}

/// Accepts the argmax class when its confidence reaches its threshold.
pub fn predict_open(posterior: ArrayView1<f64>, table: &ThresholdTable) -> Result<OpenPrediction> {
    if posterior.len() != table.thresholds.len() {
        return Err(Error::invalid(format!(
            "posterior has {} classes, thresholds cover {}",
            posterior.len(),
            table.thresholds.len()
        )));
    }
    check_posterior(posterior)?;
    let (k, conf) = argmax(posterior);
    let label = if conf >= table.for_class(k) { k } else { UNKNOWN };
    Ok(OpenPrediction {
        label,
        confidence: conf,
        argmax: k,
    })
}
