//! Open-set evaluation metrics.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::openset::argmax;
use crate::UNKNOWN;

/// Probability that a random known sample scores above a random unknown
/// one, ties counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::invalid("auroc needs non-empty known and unknown scores"));
    }
    if known.iter().chain(unknown).any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("auroc scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let knowns = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += mid * knowns as f64;
        i = j;
    }
    let n1 = known.len() as f64;
    let n2 = unknown.len() as f64;
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n2))
}

/// One point of the CCR-vs-FPR curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Confidence threshold; infinite for the extrapolated `FPR = 0` end.
    pub delta: f64,
    pub ccr: f64,
    pub fpr: f64,
}

fn max_confidences(post: &Array2<f64>) -> Vec<(usize, f64)> {
    post.outer_iter().map(argmax).collect()
}

/// CCR/FPR at every distinct confidence, in decreasing threshold order,
/// extended to `FPR = 0` by holding the first CCR constant.
///
/// `CCR(d)` counts known rows whose argmax is their label with confidence at
/// least `d`; `FPR(d)` counts unknown rows with confidence at least `d`.
pub fn oscr_curve(known_posteriors: &Array2<f64>, known_labels: &[usize], unknown_posteriors: &Array2<f64>) -> Result<Vec<CurvePoint>> {
    if known_posteriors.nrows() == 0 || unknown_posteriors.nrows() == 0 {
        return Err(Error::invalid("oscr needs non-empty known and unknown sets"));
    }
    if known_posteriors.nrows() != known_labels.len() {
        return Err(Error::invalid("one label per known posterior row"));
    }
    // (confidence, correct known, unknown)
    let mut events: Vec<(f64, bool, bool)> = max_confidences(known_posteriors)
        .into_iter()
        .zip(known_labels)
        .map(|((pred, conf), &y)| (conf, pred == y, false))
        .chain(max_confidences(unknown_posteriors).into_iter().map(|(_, c)| (c, false, true)))
        .collect();
    if events.iter().any(|e| !e.0.is_finite()) {
        return Err(Error::NumericInput("posteriors must be finite".into()));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_known = known_posteriors.nrows() as f64;
    let n_unknown = unknown_posteriors.nrows() as f64;
    let mut points = Vec::new();
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let delta = events[i].0;
        while i < events.len() && events[i].0 == delta {
            correct += events[i].1 as usize;
            false_pos += events[i].2 as usize;
            i += 1;
        }
        points.push(CurvePoint {
            delta,
            ccr: correct as f64 / n_known,
            fpr: false_pos as f64 / n_unknown,
        });
    }
    if points[0].fpr > 0.0 {
        let first = points[0];
        points.insert(
            0,
            CurvePoint {
                delta: f64::INFINITY,
                ccr: first.ccr,
                fpr: 0.0,
            },
        );
    }
    Ok(points)
}

/// Trapezoidal area under a curve from [`oscr_curve`].
pub fn area_under(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].ccr + w[1].ccr) / 2.0)
        .sum()
}

/// Open-set classification rate: area under the CCR-vs-FPR curve.
pub fn oscr(known_posteriors: &Array2<f64>, known_labels: &[usize], unknown_posteriors: &Array2<f64>) -> Result<f64> {
    Ok(area_under(&oscr_curve(known_posteriors, known_labels, unknown_posteriors)?))
}

/// Writes `delta,ccr,fpr` rows.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "delta,ccr,fpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.delta, p.ccr, p.fpr)?;
    }
    Ok(())
}

/// Unweighted mean F1 over the `K + 1` classes `UNKNOWN, 1..=K`. A class with
/// no true and no predicted rows scores 0 and still counts.
pub fn macro_f1(predicted: &[usize], truth: &[usize], known_classes: usize) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = predicted.iter().chain(truth).find(|&&l| l > known_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..={known_classes}")));
    }
    let classes = known_classes + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(f1_sum / classes as f64)
}

/// Fraction of exact matches over known-class rows.
pub fn closed_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid("closed accuracy needs equal, non-empty label lists"));
    }
    if truth.contains(&UNKNOWN) {
        return Err(Error::invalid("closed accuracy truth must not contain UNKNOWN"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
