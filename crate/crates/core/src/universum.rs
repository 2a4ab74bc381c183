//! Targeted mixup.
//!
//! Each anchor `x_i` of a batch is mixed with the average of one randomly
//! drawn row from every *other* class present in the batch:
//!
//! ```text
//! x_u = lambda * x_i + (1 - lambda) * mean(x_j : one x_j per class != y_i)
//! ```
//!
//! The result is labeled `K + y_i`, giving every known class its own
//! pseudo-unknown class (the K+K scheme). The anchor dominates the mixture,
//! so each universum row sits close to the class it was generated from.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// How universum rows are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelScheme {
    /// `K + y` for an anchor of class `y`: one pseudo class per known class.
    KPlusK,
    /// A single shared pseudo class `K + 1`.
    KPlusOne,
}

impl std::str::FromStr for PseudoLabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_plus_k" => Ok(Self::KPlusK),
            "k_plus_one" => Ok(Self::KPlusOne),
            other => Err(Error::invalid(format!("unknown pseudo-label scheme `{other}`"))),
        }
    }
}

/// Universum rows generated from a batch, one per anchor row.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversumBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub lambda: f64,
    pub source_labels: Vec<usize>,
    pub known_classes: usize,
    pub scheme: PseudoLabelScheme,
}

/// Builds one target-aware universum row per anchor.
///
/// Draws are made fresh for every anchor.
pub fn make_universum(batch: &Batch, known_classes: usize, lambda: f64, rng: &mut Rng) -> Result<UniversumBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if batch.class_count() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            found: batch.class_count(),
        });
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l == 0 || l > known_classes) {
        return Err(Error::invalid(format!("batch label {bad} outside 1..={known_classes}")));
    }

    let rows_of: Vec<Vec<usize>> = batch
        .present_classes
        .iter()
        .map(|&c| (0..batch.len()).filter(|&r| batch.labels[r] == c).collect())
        .collect();
    let others = (batch.class_count() - 1) as f64;

    let mut features = Array2::zeros(batch.features.raw_dim());
    for (r, mut out) in features.outer_iter_mut().enumerate() {
        let anchor_label = batch.labels[r];
        let mut mean = Array1::<f64>::zeros(batch.features.ncols());
        for (class, rows) in batch.present_classes.iter().zip(&rows_of) {
            if *class == anchor_label {
                continue;
            }
            let pick = rows[rng.random_range(0..rows.len())];
            mean += &batch.features.row(pick);
        }
        mean /= others;
        let anchor = batch.features.row(r);
        for ((o, &a), &m) in out.iter_mut().zip(anchor).zip(&mean) {
            *o = lambda * a + (1.0 - lambda) * m;
        }
    }

    Ok(UniversumBatch {
        features,
        labels: batch.labels.iter().map(|&y| y + known_classes).collect(),
        lambda,
        source_labels: batch.labels.clone(),
        known_classes,
        scheme: PseudoLabelScheme::KPlusK,
    })
}

/// Relabels universum rows under `scheme`. Idempotent.
pub fn assign_pseudo_labels(mut ub: UniversumBatch, scheme: PseudoLabelScheme) -> UniversumBatch {
    let k = ub.known_classes;
    ub.labels = match scheme {
        PseudoLabelScheme::KPlusK => ub.source_labels.iter().map(|&y| y + k).collect(),
        PseudoLabelScheme::KPlusOne => vec![k + 1; ub.source_labels.len()],
    };
    ub.scheme = scheme;
    ub
}

/// Mixing coefficient source for plain mixup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixupLambda {
    /// Drawn per pair from `Beta(alpha, alpha)`.
    Beta(f64),
    Fixed(f64),
}

/// Plain pairwise mixup across classes, all rows sharing one pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupPair {
    pub features: Array2<f64>,
    pub pseudo_label: usize,
    /// `(i, j)` batch rows mixed into each output row.
    pub pairs: Vec<(usize, usize)>,
    pub lambdas: Vec<f64>,
}

/// `lambda * x_i + (1 - lambda) * x_j` for every row `i` of the batch, with
/// `j` drawn uniformly from rows of a different class.
pub fn make_mixup_baseline(batch: &Batch, known_classes: usize, lambda: MixupLambda, rng: &mut Rng) -> Result<MixupPair> {
    if batch.class_count() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            found: batch.class_count(),
        });
    }
    let beta = match lambda {
        MixupLambda::Beta(alpha) => {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::invalid(format!("beta alpha must be > 0, got {alpha}")));
            }
            Some(Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?)
        }
        MixupLambda::Fixed(l) => {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("lambda must lie in [0, 1], got {l}")));
            }
            None
        }
    };

    let n = batch.len();
    let mut features = Array2::zeros(batch.features.raw_dim());
    let mut pairs = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    for (i, mut out) in features.outer_iter_mut().enumerate() {
        let candidates: Vec<usize> = (0..n).filter(|&j| batch.labels[j] != batch.labels[i]).collect();
        let j = candidates[rng.random_range(0..candidates.len())];
        let l = match (&beta, lambda) {
            (Some(b), _) => b.sample(rng),
            (None, MixupLambda::Fixed(l)) => l,
            (None, MixupLambda::Beta(_)) => unreachable!(),
        };
        for ((o, &a), &b) in out.iter_mut().zip(batch.features.row(i)).zip(batch.features.row(j)) {
            *o = l * a + (1.0 - l) * b;
        }
        pairs.push((i, j));
        lambdas.push(l);
    }
    Ok(MixupPair {
        features,
        pseudo_label: known_classes + 1,
        pairs,
        lambdas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn three_class_batch() -> Batch {
        Batch::new(
            array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [2.0, 2.0], [0.5, -3.0]],
            vec![1, 2, 3, 1, 2],
        )
        .unwrap()
    }

    #[test]
    fn lambda_one_returns_anchors() {
        let batch = three_class_batch();
        let ub = make_universum(&batch, 3, 1.0, &mut rng::seeded(0)).unwrap();
        assert_eq!(ub.features, batch.features);
        assert_eq!(ub.labels, vec![4, 5, 6, 4, 5]);
        assert_eq!(ub.source_labels, batch.labels);
    }

    #[test]
    fn hand_evaluated_mixture() {
        // one row per class, so the draws are forced
        let batch = Batch::new(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], vec![1, 2, 3]).unwrap();
        let ub = make_universum(&batch, 3, 0.5, &mut rng::seeded(0)).unwrap();
        assert_eq!(ub.features.row(0), array![0.25, 0.25]);
    }

    #[test]
    fn two_classes_collapse_to_pairwise_mixup() {
        let batch = Batch::new(array![[1.0, 2.0], [3.0, -1.0]], vec![1, 2]).unwrap();
        let lambda = 0.3;
        let ub = make_universum(&batch, 2, lambda, &mut rng::seeded(5)).unwrap();
        let expect0 = &batch.features.row(0) * lambda + &batch.features.row(1) * (1.0 - lambda);
        let expect1 = &batch.features.row(1) * lambda + &batch.features.row(0) * (1.0 - lambda);
        assert_eq!(ub.features.row(0), expect0);
        assert_eq!(ub.features.row(1), expect1);
    }

    #[test]
    fn universum_errors() {
        let single = Batch::new(array![[1.0], [2.0]], vec![1, 1]).unwrap();
        assert!(matches!(
            make_universum(&single, 2, 0.5, &mut rng::seeded(0)),
            Err(Error::InsufficientClasses { found: 1, .. })
        ));
        let batch = three_class_batch();
        assert!(make_universum(&batch, 3, 1.5, &mut rng::seeded(0)).is_err());
        assert!(make_universum(&batch, 2, 0.5, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn pseudo_label_schemes() {
        let batch = Batch::new(array![[0.0], [1.0], [2.0]], vec![3, 1, 6]).unwrap();
        let ub = make_universum(&batch, 6, 0.5, &mut rng::seeded(0)).unwrap();
        let kk = assign_pseudo_labels(ub.clone(), PseudoLabelScheme::KPlusK);
        assert_eq!(kk.labels, vec![9, 7, 12]);
        let k1 = assign_pseudo_labels(ub, PseudoLabelScheme::KPlusOne);
        assert_eq!(k1.labels, vec![7, 7, 7]);
        let again = assign_pseudo_labels(k1.clone(), PseudoLabelScheme::KPlusOne);
        assert_eq!(again, k1);
        let back = assign_pseudo_labels(k1, PseudoLabelScheme::KPlusK);
        assert_eq!(back, kk);
    }

    #[test]
    fn mixup_fixed_lambda_extremes() {
        let batch = three_class_batch();
        let one = make_mixup_baseline(&batch, 3, MixupLambda::Fixed(1.0), &mut rng::seeded(2)).unwrap();
        assert_eq!(one.features, batch.features);
        let zero = make_mixup_baseline(&batch, 3, MixupLambda::Fixed(0.0), &mut rng::seeded(2)).unwrap();
        for (row, &(i, j)) in zero.features.outer_iter().zip(&zero.pairs) {
            assert_eq!(row, batch.features.row(j));
            assert_ne!(batch.labels[i], batch.labels[j]);
        }
        assert_eq!(zero.pseudo_label, 4);
    }

    #[test]
    fn mixup_errors() {
        let single = Batch::new(array![[1.0], [2.0]], vec![2, 2]).unwrap();
        assert!(make_mixup_baseline(&single, 2, MixupLambda::Beta(1.0), &mut rng::seeded(0)).is_err());
        let batch = three_class_batch();
        assert!(make_mixup_baseline(&batch, 3, MixupLambda::Beta(0.0), &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("k_plus_k".parse::<PseudoLabelScheme>().unwrap(), PseudoLabelScheme::KPlusK);
        assert_eq!("k_plus_one".parse::<PseudoLabelScheme>().unwrap(), PseudoLabelScheme::KPlusOne);
        assert!("k_plus_2k".parse::<PseudoLabelScheme>().is_err());
    }
}
