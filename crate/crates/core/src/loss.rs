//! Supervised contrastive loss and the dual contrastive loss over known and
//! universum embeddings, with analytic gradients.
//!
//! All three losses share one kernel. For anchor rows `a` with labels `y`
//! and a set of cross rows `c`, the term of anchor `i` is
//!
//! ```text
//! l_i = -1/|P(i)| sum_{p in P(i)} log( exp(a_i.a_p/t) / S_i )
//! S_i = sum_{k != i} exp(a_i.a_k/t) + sum_{j in X(i)} exp(a_i.c_j/t)
//! ```
//!
//! where `P(i)` are the other anchor rows sharing `y_i` and `X(i)` are the
//! cross rows linked to anchor `i`. With no cross rows this is SupCon. With
//! known anchors and universum cross rows linked to the anchor's class it is
//! the known-side term `L^k`; with the roles exchanged it is the
//! universum-side term `L^u`. The loss is summed (not averaged) over anchors.
//!
//! Log-sum-exp is stabilised by subtracting the per-anchor maximum over the
//! terms that actually enter `S_i`, so an anchor whose cross set is empty is
//! evaluated with exactly the same operations as plain SupCon.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::universum::PseudoLabelScheme;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the universum-side term.
    pub gamma: f64,
    /// `false` drops `L^u` entirely, leaving only the known-side term.
    pub include_universum_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            gamma: DEFAULT_GAMMA,
            include_universum_term: true,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Which universum rows contrast against which known class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pairing {
    pub known_classes: usize,
    pub scheme: PseudoLabelScheme,
}

impl Pairing {
    pub fn targeted(known_classes: usize) -> Self {
        Self {
            known_classes,
            scheme: PseudoLabelScheme::KPlusK,
        }
    }

    pub fn shared(known_classes: usize) -> Self {
        Self {
            known_classes,
            scheme: PseudoLabelScheme::KPlusOne,
        }
    }

    /// Whether a universum row labeled `pseudo` is the targeted universum of
    /// known class `known`. Under the shared scheme the single pseudo class
    /// targets every known class.
    pub fn links(&self, known: usize, pseudo: usize) -> bool {
        match self.scheme {
            PseudoLabelScheme::KPlusK => pseudo == known + self.known_classes,
            PseudoLabelScheme::KPlusOne => true,
        }
    }

    fn validate(&self, labels: &[usize], u_labels: &[usize]) -> Result<()> {
        let k = self.known_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::invalid(format!("known label {bad} outside 1..={k}")));
        }
        let ok = |l: usize| match self.scheme {
            PseudoLabelScheme::KPlusK => l > k && l <= 2 * k,
            PseudoLabelScheme::KPlusOne => l == k + 1,
        };
        if let Some(&bad) = u_labels.iter().find(|&&l| !ok(l)) {
            return Err(Error::invalid(format!(
                "universum label {bad} does not correspond to a known class under {:?}",
                self.scheme
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// dL/dz, one row per known embedding.
    pub grad_z: Array2<f64>,
    /// dL/du, one row per universum embedding (zero rows for SupCon).
    pub grad_u: Array2<f64>,
    /// Anchors left out because they had no positive in the batch.
    pub skipped_anchors: usize,
}

/// Per-anchor split of the anchor's own gradient into a positive pull, the
/// known-row push `G_NK` and the universum push `G_TAU`.
///
/// `-(positive + g_nk + g_tau) / t` equals the derivative of the anchor's
/// own term `l_i` with respect to `z_i`. The pushes are stored with their
/// sign, `g_nk = -1/S sum C_k z_k` and `g_tau = -1/S sum O_j u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDecomposition {
    pub anchor: usize,
    /// Mean of the positive embeddings.
    pub positive: Array1<f64>,
    pub g_nk: Array1<f64>,
    pub g_tau: Array1<f64>,
    /// `(row, C_k)` for every other known row `k != i`, positives included.
    pub known_weights: Vec<(usize, f64)>,
    /// `(row, O_j)` for every linked universum row.
    pub tau_weights: Vec<(usize, f64)>,
    pub positives: Vec<usize>,
    /// `S = sum C_k + sum O_j`.
    pub normalizer: f64,
    pub temperature: f64,
}

impl AnchorDecomposition {
    pub fn reassemble(&self) -> Array1<f64> {
        -(&self.positive + &self.g_nk + &self.g_tau) / self.temperature
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientDecomposition {
    pub anchors: Vec<AnchorDecomposition>,
    /// `dl_i/dz_i` for every anchor row, computed by the vectorised kernel.
    /// Rows of skipped anchors are zero.
    pub own_gradients: Array2<f64>,
}

impl GradientDecomposition {
    /// Writes `anchor,kind,row,positive,weight` rows of normalised weights.
    pub fn write_weights_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "anchor,kind,row,positive,weight")?;
        for a in &self.anchors {
            for nw in hard_negative_weights(a) {
                let (kind, row, positive) = match nw.source {
                    WeightSource::Known { row, positive } => ("known", row, positive),
                    WeightSource::Universum { row } => ("universum", row, false),
                };
                writeln!(w, "{},{kind},{row},{positive},{}", a.anchor, nw.weight)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSource {
    Known { row: usize, positive: bool },
    Universum { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeWeight {
    pub source: WeightSource,
    pub weight: f64,
}

/// Share of the anchor's push carried by each denominator term: `C_k / S`
/// for known rows and `O_j / S` for universum rows. Sums to one.
pub fn hard_negative_weights(decomp: &AnchorDecomposition) -> Vec<NegativeWeight> {
    let s = decomp.normalizer;
    let known = decomp.known_weights.iter().map(|&(row, c)| NegativeWeight {
        source: WeightSource::Known {
            row,
            positive: decomp.positives.contains(&row),
        },
        weight: c / s,
    });
    let tau = decomp.tau_weights.iter().map(|&(row, o)| NegativeWeight {
        source: WeightSource::Universum { row },
        weight: o / s,
    });
    known.chain(tau).collect()
}

struct KernelOutput {
    value: f64,
    grad_anchor: Array2<f64>,
    grad_cross: Array2<f64>,
    own: Array2<f64>,
    skipped: usize,
    evaluated: usize,
}

/// Shared kernel. `linked(i, j)` says whether cross row `j` enters anchor
/// `i`'s denominator.
fn contrast(
    anchors: ArrayView2<f64>,
    labels: &[usize],
    cross: ArrayView2<f64>,
    linked: &dyn Fn(usize, usize) -> bool,
    temperature: f64,
) -> KernelOutput {
    let n = anchors.nrows();
    let m = cross.nrows();
    let inv_t = 1.0 / temperature;
    let sim_aa = anchors.dot(&anchors.t()) * inv_t;
    let sim_ac = anchors.dot(&cross.t()) * inv_t;

    // coefficient matrices: d l_i / d a_k = coef_aa[i,k] a_i, etc.
    let mut coef_aa = Array2::<f64>::zeros((n, n));
    let mut coef_ac = Array2::<f64>::zeros((n, m));
    let mut value = 0.0;
    let mut skipped = 0;
    let mut evaluated = 0;

    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let row_aa = sim_aa.row(i);
        let row_ac = sim_ac.row(i);
        let cross_idx: Vec<usize> = (0..m).filter(|&j| linked(i, j)).collect();

        let mut max = f64::NEG_INFINITY;
        for k in (0..n).filter(|&k| k != i) {
            max = max.max(row_aa[k]);
        }
        for &j in &cross_idx {
            max = max.max(row_ac[j]);
        }
        let mut denom = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            denom += (row_aa[k] - max).exp();
        }
        for &j in &cross_idx {
            denom += (row_ac[j] - max).exp();
        }
        let log_s = max + denom.ln();
        let inv_p = 1.0 / positives.len() as f64;
        let pos_mean: f64 = positives.iter().map(|&p| row_aa[p]).sum::<f64>() * inv_p;
        value += log_s - pos_mean;

        for k in (0..n).filter(|&k| k != i) {
            coef_aa[[i, k]] = (row_aa[k] - log_s).exp() * inv_t;
        }
        for &p in &positives {
            coef_aa[[i, p]] -= inv_p * inv_t;
        }
        for &j in &cross_idx {
            coef_ac[[i, j]] = (row_ac[j] - log_s).exp() * inv_t;
        }
    }

    let own = coef_aa.dot(&anchors) + coef_ac.dot(&cross);
    let grad_anchor = &own + &coef_aa.t().dot(&anchors);
    let grad_cross = coef_ac.t().dot(&anchors);
    KernelOutput {
        value,
        grad_anchor,
        grad_cross,
        own,
        skipped,
        evaluated,
    }
}

fn check_rows(name: &str, x: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{name}: {} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!("{name} contains non-finite values")));
    }
    Ok(())
}

fn check_pair(z: &ArrayView2<f64>, u: &ArrayView2<f64>) -> Result<()> {
    if u.nrows() > 0 && z.ncols() != u.ncols() {
        return Err(Error::invalid(format!(
            "embedding widths differ: {} vs {}",
            z.ncols(),
            u.ncols()
        )));
    }
    Ok(())
}

/// Supervised contrastive loss over one set of embeddings.
pub fn supcon_loss_grad(z: ArrayView2<f64>, labels: &[usize], cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    check_rows("z", &z, labels)?;
    if z.nrows() < 2 {
        return Err(Error::invalid("supcon needs at least two rows"));
    }
    let empty = Array2::<f64>::zeros((0, z.ncols()));
    let out = contrast(z, labels, empty.view(), &|_, _| false, cfg.temperature);
    if out.evaluated == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(LossResult {
        value: out.value,
        grad_z: out.grad_anchor,
        grad_u: out.grad_cross,
        skipped_anchors: out.skipped,
    })
}

/// Known-side dual contrastive term `L^k` and its per-anchor decomposition.
///
/// Each known anchor's denominator additionally holds the universum rows
/// that target its class.
pub fn dc_known_loss_grad(
    z: ArrayView2<f64>,
    labels: &[usize],
    u: ArrayView2<f64>,
    u_labels: &[usize],
    pairing: Pairing,
    cfg: &LossConfig,
) -> Result<(LossResult, GradientDecomposition)> {
    cfg.validate()?;
    check_rows("z", &z, labels)?;
    check_rows("u", &u, u_labels)?;
    check_pair(&z, &u)?;
    pairing.validate(labels, u_labels)?;
    if z.nrows() < 2 {
        return Err(Error::invalid("dual contrastive loss needs at least two known rows"));
    }
    let linked = |i: usize, j: usize| pairing.links(labels[i], u_labels[j]);
    let out = contrast(z, labels, u, &linked, cfg.temperature);
    if out.evaluated == 0 {
        return Err(Error::DegenerateBatch);
    }
    let anchors = decompose(z, labels, u, &linked, cfg.temperature);
    Ok((
        LossResult {
            value: out.value,
            grad_z: out.grad_anchor,
            grad_u: out.grad_cross,
            skipped_anchors: out.skipped,
        },
        GradientDecomposition {
            anchors,
            own_gradients: out.own,
        },
    ))
}

/// Universum-side dual contrastive term `L^u`.
///
/// Universum rows are the anchors; positives share the pseudo label, and the
/// denominator also holds the known rows of the anchor's targeted class.
pub fn dc_universum_loss_grad(
    u: ArrayView2<f64>,
    u_labels: &[usize],
    z: ArrayView2<f64>,
    labels: &[usize],
    pairing: Pairing,
    cfg: &LossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    check_rows("z", &z, labels)?;
    check_rows("u", &u, u_labels)?;
    check_pair(&z, &u)?;
    pairing.validate(labels, u_labels)?;
    if u.nrows() < 2 {
        return Err(Error::invalid("universum term needs at least two universum rows"));
    }
    let linked = |i: usize, j: usize| pairing.links(labels[j], u_labels[i]);
    let out = contrast(u, u_labels, z, &linked, cfg.temperature);
    if out.evaluated == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(LossResult {
        value: out.value,
        grad_z: out.grad_cross,
        grad_u: out.grad_anchor,
        skipped_anchors: out.skipped,
    })
}

/// `L = L^k + gamma * L^u`, or `L^k` alone when the universum term is off.
pub fn dc_total_loss_grad(
    z: ArrayView2<f64>,
    labels: &[usize],
    u: ArrayView2<f64>,
    u_labels: &[usize],
    pairing: Pairing,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let (mut total, _) = dc_known_loss_grad(z, labels, u, u_labels, pairing, cfg)?;
    if !cfg.include_universum_term || cfg.gamma == 0.0 || u.nrows() < 2 {
        return Ok(total);
    }
    let uni = dc_universum_loss_grad(u, u_labels, z, labels, pairing, cfg)?;
    total.value += cfg.gamma * uni.value;
    total.grad_z.scaled_add(cfg.gamma, &uni.grad_z);
    total.grad_u.scaled_add(cfg.gamma, &uni.grad_u);
    total.skipped_anchors += uni.skipped_anchors;
    Ok(total)
}

/// Explicit per-anchor sums, independent of the matrix kernel.
fn decompose(
    z: ArrayView2<f64>,
    labels: &[usize],
    u: ArrayView2<f64>,
    linked: &dyn Fn(usize, usize) -> bool,
    temperature: f64,
) -> Vec<AnchorDecomposition> {
    let n = z.nrows();
    let dim = z.ncols();
    let mut out = Vec::new();
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let zi = z.row(i);
        let known_weights: Vec<(usize, f64)> = (0..n)
            .filter(|&k| k != i)
            .map(|k| (k, (zi.dot(&z.row(k)) / temperature).exp()))
            .collect();
        let tau_weights: Vec<(usize, f64)> = (0..u.nrows())
            .filter(|&j| linked(i, j))
            .map(|j| (j, (zi.dot(&u.row(j)) / temperature).exp()))
            .collect();
        let normalizer = known_weights.iter().map(|w| w.1).sum::<f64>() + tau_weights.iter().map(|w| w.1).sum::<f64>();

        let mut positive = Array1::zeros(dim);
        for &p in &positives {
            positive += &z.row(p);
        }
        positive /= positives.len() as f64;
        let mut g_nk = Array1::zeros(dim);
        for &(k, c) in &known_weights {
            g_nk.scaled_add(-c / normalizer, &z.row(k));
        }
        let mut g_tau = Array1::zeros(dim);
        for &(j, o) in &tau_weights {
            g_tau.scaled_add(-o / normalizer, &u.row(j));
        }
        out.push(AnchorDecomposition {
            anchor: i,
            positive,
            g_nk,
            g_tau,
            known_weights,
            tau_weights,
            positives,
            normalizer,
            temperature,
        });
    }
    out
}

/// Row-normalises `x` (zero rows are left untouched).
pub fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}
