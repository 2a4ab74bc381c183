//! Numeric self-checks: finite-difference gradient checks, loss identities
//! and brute-force metric oracles. Backs the `verify` command.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::loss::{
    dc_known_loss_grad, dc_total_loss_grad, dc_universum_loss_grad, hard_negative_weights, normalize_rows,
    supcon_loss_grad, LossConfig, LossResult, Pairing, WeightSource,
};
use crate::metrics::{auroc, macro_f1, oscr};
use crate::model::{backprop_embedding_into, classifier_loss_grad, embed, init_params, ModelParams, ModelShape, ParamGroup};
use crate::openset::argmax;
use crate::rng::{self, Rng};
use crate::universum::PseudoLabelScheme;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Largest accepted decomposition residual.
pub const DECOMP_TOL: f64 = 1e-10;
/// Largest accepted metric disagreement.
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One `[PASS]`/`[FAIL]` line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "[{tag}] {}: {}", c.name, c.detail);
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed in {:.2}s", self.checks.len(), self.seconds);
        out
    }

    /// `Err(Verification)` naming the failed checks, if any.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(Error::Verification(failed.join(", ")))
        }
    }
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Value and gradients of a loss over known embeddings `z` and universum
/// embeddings `u`.
pub type EmbeddingLoss<'a> = dyn Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> + 'a;

fn central_difference(x: &mut Array2<f64>, r: usize, c: usize, h: f64, f: &mut dyn FnMut(&Array2<f64>) -> Result<f64>) -> Result<f64> {
    let orig = x[[r, c]];
    x[[r, c]] = orig + h;
    let plus = f(x)?;
    x[[r, c]] = orig - h;
    let minus = f(x)?;
    x[[r, c]] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Relative error between the analytic `(dL/dz, dL/du)` of `loss` and
/// central differences with step `h`, over both inputs jointly.
pub fn fd_check_embeddings(loss: &EmbeddingLoss, z: &Array2<f64>, u: &Array2<f64>, h: f64) -> Result<f64> {
    let (_, gz, gu) = loss(z.view(), u.view())?;
    let mut analytic: Vec<f64> = gz.iter().copied().collect();
    analytic.extend(gu.iter().copied());

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut zz = z.clone();
    for r in 0..z.nrows() {
        for c in 0..z.ncols() {
            numeric.push(central_difference(&mut zz, r, c, h, &mut |x| Ok(loss(x.view(), u.view())?.0))?);
        }
    }
    let mut uu = u.clone();
    for r in 0..u.nrows() {
        for c in 0..u.ncols() {
            numeric.push(central_difference(&mut uu, r, c, h, &mut |x| Ok(loss(z.view(), x.view())?.0))?);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn param_fd(params: &ModelParams, group: ParamGroup, h: f64, f: &dyn Fn(&ModelParams) -> Result<f64>) -> Result<Vec<(usize, usize, f64)>> {
    let mut work = params.clone();
    let indices: Vec<(usize, usize)> = work
        .blocks_mut(group)
        .into_iter()
        .flat_map(|(b, s)| (0..s.len()).map(move |j| (b, j)))
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    for (b, j) in indices {
        let set = |p: &mut ModelParams, v: f64| {
            for (idx, s) in p.blocks_mut(group) {
                if idx == b {
                    s[j] = v;
                }
            }
        };
        let orig = params.blocks()[b][j];
        set(&mut work, orig + h);
        let plus = f(&work)?;
        set(&mut work, orig - h);
        let minus = f(&work)?;
        set(&mut work, orig);
        out.push((b, j, (plus - minus) / (2.0 * h)));
    }
    Ok(out)
}

/// Finite-difference check of the full path inputs -> encoder -> projection
/// -> normalisation -> `loss`, over encoder and projection parameters.
/// `x` are the known inputs and `xu` the universum inputs.
pub fn fd_check_network(params: &ModelParams, x: &Array2<f64>, xu: &Array2<f64>, loss: &EmbeddingLoss, h: f64) -> Result<f64> {
    let value = |p: &ModelParams| -> Result<f64> {
        let (z, _) = embed(p, x)?;
        let (u, _) = embed(p, xu)?;
        Ok(loss(z.view(), u.view())?.0)
    };
    let (z, tz) = embed(params, x)?;
    let (u, tu) = embed(params, xu)?;
    let (_, gz, gu) = loss(z.view(), u.view())?;
    let mut grads = params.zeros_like();
    backprop_embedding_into(params, &tz, &gz, &mut grads)?;
    backprop_embedding_into(params, &tu, &gu, &mut grads)?;

    let fd = param_fd(params, ParamGroup::EncoderAndProjection, h, &value)?;
    let blocks = grads.blocks();
    let analytic: Vec<f64> = fd.iter().map(|&(b, j, _)| blocks[b][j]).collect();
    let numeric: Vec<f64> = fd.iter().map(|e| e.2).collect();
    Ok(relative_error(&analytic, &numeric))
}

/// Finite-difference check of the cross-entropy path. With `frozen` false
/// the encoder parameters are checked too.
pub fn fd_check_classifier(params: &ModelParams, x: &Array2<f64>, labels: &[usize], frozen: bool, h: f64) -> Result<f64> {
    let (_, grads) = classifier_loss_grad(params, x, labels, frozen)?;
    let value = |p: &ModelParams| Ok(classifier_loss_grad(p, x, labels, true)?.0);
    let mut fd = param_fd(params, ParamGroup::Classifier, h, &value)?;
    if !frozen {
        let n_enc = 2 * params.encoder.layers.len();
        fd.extend(param_fd(params, ParamGroup::All, h, &value)?.into_iter().filter(|e| e.0 < n_enc));
    }
    let blocks = grads.blocks();
    let analytic: Vec<f64> = fd.iter().map(|&(b, j, _)| blocks[b][j]).collect();
    let numeric: Vec<f64> = fd.iter().map(|e| e.2).collect();
    Ok(relative_error(&analytic, &numeric))
}

/// Random unit embeddings for loss checks.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub u: Array2<f64>,
    pub u_labels: Vec<usize>,
    pub pairing: Pairing,
    pub config: LossConfig,
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `rows` known rows over `classes` classes (each at least twice), one
/// universum row per known row labeled under `scheme`, temperature in
/// `[0.1, 1]`.
pub fn random_fixture(seed: u64, rows: usize, dim: usize, classes: usize, scheme: PseudoLabelScheme) -> Fixture {
    assert!(rows >= 2 * classes && classes >= 2);
    let mut rng = rng::seeded(seed);
    let mut labels: Vec<usize> = (0..rows).map(|r| r % classes + 1).collect();
    for i in (1..rows).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let u_labels = labels
        .iter()
        .map(|&y| match scheme {
            PseudoLabelScheme::KPlusK => y + classes,
            PseudoLabelScheme::KPlusOne => classes + 1,
        })
        .collect();
    Fixture {
        z: normalize_rows(&gaussian(rows, dim, &mut rng)),
        labels,
        u: normalize_rows(&gaussian(rows, dim, &mut rng)),
        u_labels,
        pairing: Pairing {
            known_classes: classes,
            scheme,
        },
        config: LossConfig {
            temperature: rng.random_range(0.1..=1.0),
            gamma: rng.random_range(0.5..=2.0),
            include_universum_term: true,
        },
    }
}

fn triple(r: LossResult) -> (f64, Array2<f64>, Array2<f64>) {
    (r.value, r.grad_z, r.grad_u)
}

/// The four losses as [`EmbeddingLoss`] closures over a fixture's labels.
pub fn fixture_losses(f: &Fixture) -> Vec<(&'static str, Box<EmbeddingLoss<'_>>)> {
    vec![
        (
            "supcon",
            Box::new(move |z: ArrayView2<f64>, _u: ArrayView2<f64>| {
                let mut r = supcon_loss_grad(z, &f.labels, &f.config)?;
                r.grad_u = Array2::zeros(f.u.raw_dim());
                Ok(triple(r))
            }),
        ),
        (
            "dc_known",
            Box::new(move |z: ArrayView2<f64>, u: ArrayView2<f64>| {
                Ok(triple(dc_known_loss_grad(z, &f.labels, u, &f.u_labels, f.pairing, &f.config)?.0))
            }),
        ),
        (
            "dc_universum",
            Box::new(move |z: ArrayView2<f64>, u: ArrayView2<f64>| {
                Ok(triple(dc_universum_loss_grad(u, &f.u_labels, z, &f.labels, f.pairing, &f.config)?))
            }),
        ),
        (
            "dc_total",
            Box::new(move |z: ArrayView2<f64>, u: ArrayView2<f64>| {
                Ok(triple(dc_total_loss_grad(z, &f.labels, u, &f.u_labels, f.pairing, &f.config)?))
            }),
        ),
    ]
}

fn scheme_for(seed: u64) -> PseudoLabelScheme {
    if seed % 2 == 0 {
        PseudoLabelScheme::KPlusK
    } else {
        PseudoLabelScheme::KPlusOne
    }
}

/// Fresh layers have zero biases, so a row whose hidden units are all
/// inactive lands exactly on a ReLU kink (or on a zero projection). Small
/// random biases move the check point off those non-differentiable spots.
fn jitter_biases(params: &mut ModelParams, rng: &mut Rng) {
    for mlp in [&mut params.encoder, &mut params.projection, &mut params.classifier] {
        for layer in &mut mlp.layers {
            layer.bias.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

/// Embedding-level and network-level gradient checks over `seeds` random
/// batches (24 rows, 16 dims for embeddings; 12 rows through a small network).
pub fn check_gradients(seeds: u64) -> Vec<CheckOutcome> {
    let mut worst = [0.0f64; 4];
    let names = ["supcon", "dc_known", "dc_universum", "dc_total"];
    let mut net_worst = 0.0f64;
    let mut cls_worst = 0.0f64;
    let mut error = None;
    for seed in 0..seeds {
        let run = || -> Result<(Vec<f64>, f64, f64)> {
            let f = random_fixture(seed, 24, 16, 4, scheme_for(seed));
            let mut errs = Vec::new();
            for (_, loss) in fixture_losses(&f).iter() {
                errs.push(fd_check_embeddings(loss.as_ref(), &f.z, &f.u, FD_STEP)?);
            }

            let small = random_fixture(seed + 1000, 12, 4, 3, scheme_for(seed));
            let shape = ModelShape {
                classifier_hidden: vec![5],
                ..ModelShape::new(5, vec![7], 4, 3)
            };
            let mut params = init_params(&shape, seed)?;
            let mut rng = rng::seeded(seed ^ 0xfd);
            jitter_biases(&mut params, &mut rng);
            let x = gaussian(12, 5, &mut rng);
            let xu = gaussian(12, 5, &mut rng);
            let loss = &fixture_losses(&small)[3].1;
            let net = fd_check_network(&params, &x, &xu, loss.as_ref(), FD_STEP)?;
            let cls = fd_check_classifier(&params, &x, &small.labels, seed % 2 == 0, FD_STEP)?;
            Ok((errs, net, cls))
        };
        match run() {
            Ok((errs, net, cls)) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
                net_worst = net_worst.max(net);
                cls_worst = cls_worst.max(cls);
            }
            Err(e) => {
                error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    if let Some(e) = error {
        return vec![CheckOutcome::new("gradient checks", false, e)];
    }
    let mut out: Vec<CheckOutcome> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| {
            CheckOutcome::new(
                &format!("{n} gradient"),
                w < GRAD_TOL,
                format!("max relative error {w:.2e} over {seeds} seeds"),
            )
        })
        .collect();
    out.push(CheckOutcome::new(
        "network gradient",
        net_worst < GRAD_TOL,
        format!("max relative error {net_worst:.2e} over {seeds} seeds"),
    ));
    out.push(CheckOutcome::new(
        "cross-entropy gradient",
        cls_worst < GRAD_TOL,
        format!("max relative error {cls_worst:.2e} over {seeds} seeds"),
    ));
    out
}

/// The known-side loss with no universum rows must equal SupCon bit for bit.
pub fn check_reduction(cases: u64) -> CheckOutcome {
    for seed in 0..cases {
        let f = random_fixture(seed, 16, 8, 3, PseudoLabelScheme::KPlusK);
        let empty = Array2::<f64>::zeros((0, f.z.ncols()));
        let sup = supcon_loss_grad(f.z.view(), &f.labels, &f.config);
        let dc = dc_known_loss_grad(f.z.view(), &f.labels, empty.view(), &[], f.pairing, &f.config);
        match (sup, dc) {
            (Ok(s), Ok((d, _))) => {
                let same = s.value.to_bits() == d.value.to_bits()
                    && s.grad_z.iter().zip(&d.grad_z).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return CheckOutcome::new("reduction identity", false, format!("seed {seed}: values differ"));
                }
            }
            (a, b) => {
                return CheckOutcome::new(
                    "reduction identity",
                    false,
                    format!("seed {seed}: {:?} / {:?}", a.err(), b.err()),
                )
            }
        }
    }
    CheckOutcome::new("reduction identity", true, format!("bitwise equal on {cases} inputs"))
}

/// Reassembly of the per-anchor decomposition and the shrinkage of every
/// known weight once universum rows join the denominator.
pub fn check_decomposition(cases: u64) -> Vec<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut shrink_ok = true;
    let mut anchors_seen = 0usize;
    for seed in 0..cases {
        let f = random_fixture(seed, 20, 8, 4, scheme_for(seed));
        let d = match dc_known_loss_grad(f.z.view(), &f.labels, f.u.view(), &f.u_labels, f.pairing, &f.config) {
            Ok((_, d)) => d,
            Err(e) => return vec![CheckOutcome::new("decomposition", false, format!("seed {seed}: {e}"))],
        };
        for a in &d.anchors {
            let own = d.own_gradients.row(a.anchor);
            let diff = (&a.reassemble() - &own).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(diff);
            if !a.tau_weights.is_empty() {
                anchors_seen += 1;
                let sum_c: f64 = a.known_weights.iter().map(|w| w.1).sum();
                for nw in hard_negative_weights(a) {
                    if let WeightSource::Known { row, .. } = nw.source {
                        let c = a.known_weights.iter().find(|w| w.0 == row).expect("row listed").1;
                        shrink_ok &= nw.weight < c / sum_c;
                    }
                }
            }
        }
    }
    vec![
        CheckOutcome::new(
            "decomposition reassembly",
            worst < DECOMP_TOL,
            format!("max residual {worst:.2e} over {cases} batches"),
        ),
        CheckOutcome::new(
            "fair-contrast shrinkage",
            shrink_ok && anchors_seen > 0,
            format!("{anchors_seen} anchors with universum rows"),
        ),
    ]
}

/// Embeddings for the hard-negative situations: anchor 0 and a positive,
/// one known negative with `anchor . neg = a`, and one linked universum row
/// with `anchor . u = b`.
pub fn situation_weights(a: f64, b: f64, temperature: f64) -> Result<(f64, f64, f64)> {
    let z = ndarray::array![
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [a, (1.0 - a * a).sqrt(), 0.0, 0.0],
    ];
    let u = ndarray::array![[b, 0.0, (1.0 - b * b).sqrt(), 0.0]];
    let labels = [1, 1, 2];
    let cfg = LossConfig {
        temperature,
        ..LossConfig::default()
    };
    let (_, d) = dc_known_loss_grad(z.view(), &labels, u.view(), &[3], Pairing::targeted(2), &cfg)?;
    let anchor = d.anchors.iter().find(|x| x.anchor == 0).expect("anchor 0 has a positive");
    let weights = hard_negative_weights(anchor);
    let pick = |want: &dyn Fn(&WeightSource) -> bool| weights.iter().find(|w| want(&w.source)).map(|w| w.weight).unwrap_or(f64::NAN);
    let known = pick(&|s| matches!(s, WeightSource::Known { row: 2, .. }));
    let tau = pick(&|s| matches!(s, WeightSource::Universum { .. }));
    let total: f64 = weights.iter().map(|w| w.weight).sum();
    Ok((known, tau, total))
}

/// Hard-known / easy-universum, easy-known / hard-universum and the
/// symmetric case.
pub fn check_situations() -> CheckOutcome {
    let t = 0.5;
    let run = || -> Result<String> {
        let mut worst = 0.0f64;
        for (a, b) in [(1.0, 0.0), (0.0, 1.0), (0.8, 0.3), (0.3, 0.8)] {
            let (k, u, total) = situation_weights(a, b, t)?;
            let expect = ((a - b) / t).exp();
            worst = worst.max(((k / u) / expect - 1.0).abs());
            worst = worst.max((total - 1.0).abs());
        }
        if worst > METRIC_TOL {
            return Err(Error::Verification(format!("ratio error {worst:.2e}")));
        }
        let z = Array2::from_elem((4, 3), 1.0 / 3f64.sqrt());
        let u = z.clone();
        let cfg = LossConfig {
            temperature: t,
            ..LossConfig::default()
        };
        let (_, d) = dc_known_loss_grad(z.view(), &[1, 1, 2, 2], u.view(), &[3, 3, 4, 4], Pairing::targeted(2), &cfg)?;
        for a in &d.anchors {
            let w = hard_negative_weights(a);
            if w.iter().any(|x| x.weight != w[0].weight) {
                return Err(Error::Verification("symmetric weights differ".into()));
            }
        }
        Ok(format!("ratios match exp(delta/t) within {worst:.1e}; symmetric case exactly equal"))
    };
    match run() {
        Ok(detail) => CheckOutcome::new("hard-negative situations", true, detail),
        Err(e) => CheckOutcome::new("hard-negative situations", false, e.to_string()),
    }
}

/// Pairwise AUROC, quadratic.
pub fn brute_auroc(known: &[f64], unknown: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &k in known {
        for &u in unknown {
            wins += if k > u {
                1.0
            } else if k == u {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (known.len() * unknown.len()) as f64
}

/// OSCR by direct counting at every candidate threshold.
pub fn brute_oscr(known: &Array2<f64>, labels: &[usize], unknown: &Array2<f64>) -> f64 {
    let k: Vec<(usize, f64)> = known.outer_iter().map(argmax).collect();
    let u: Vec<f64> = unknown.outer_iter().map(|r| argmax(r).1).collect();
    let mut thresholds: Vec<f64> = k.iter().map(|e| e.1).chain(u.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&d| {
            let ccr = k.iter().zip(labels).filter(|((p, c), y)| p == *y && *c >= d).count() as f64 / k.len() as f64;
            let fpr = u.iter().filter(|&&c| c >= d).count() as f64 / u.len() as f64;
            (fpr, ccr)
        })
        .collect();
    pts.insert(0, (0.0, pts[0].1));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Macro-F1 from an explicit confusion matrix via precision and recall.
pub fn brute_macro_f1(predicted: &[usize], truth: &[usize], known_classes: usize) -> f64 {
    let n = known_classes + 1;
    let mut cm = vec![vec![0usize; n]; n];
    for (&p, &t) in predicted.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut sum = 0.0;
    for c in 0..n {
        let tp = cm[c][c] as f64;
        let pred_c: usize = (0..n).map(|t| cm[t][c]).sum();
        let true_c: usize = cm[c].iter().sum();
        if tp > 0.0 {
            let p = tp / pred_c as f64;
            let r = tp / true_c as f64;
            sum += 2.0 * p * r / (p + r);
        }
    }
    sum / n as f64
}

fn random_posteriors(rows: usize, classes: usize, rng: &mut Rng) -> Array2<f64> {
    let mut p = Array2::from_shape_simple_fn((rows, classes), || {
        // coarse grid so ties occur
        (rng.random_range(0..20) as f64 + 1.0) / 20.0
    });
    for mut r in p.outer_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    p
}

/// Metric implementations against the brute-force versions above.
pub fn check_metrics(cases: u64) -> Vec<CheckOutcome> {
    let mut worst = [0.0f64; 3];
    for seed in 0..cases {
        let mut rng = rng::seeded(seed);
        let n1 = rng.random_range(1..=100);
        let n2 = rng.random_range(1..=100);
        let k = rng.random_range(2..=5);
        let known = random_posteriors(n1, k, &mut rng);
        let unknown = random_posteriors(n2, k, &mut rng);
        let labels: Vec<usize> = (0..n1).map(|_| rng.random_range(1..=k)).collect();
        let ks: Vec<f64> = known.outer_iter().map(|r| argmax(r).1).collect();
        let us: Vec<f64> = unknown.outer_iter().map(|r| argmax(r).1).collect();

        let a = auroc(&ks, &us).map(|v| (v - brute_auroc(&ks, &us)).abs());
        let o = oscr(&known, &labels, &unknown).map(|v| (v - brute_oscr(&known, &labels, &unknown)).abs());
        let pred: Vec<usize> = (0..n1 + n2).map(|_| rng.random_range(0..=k)).collect();
        let truth: Vec<usize> = (0..n1 + n2).map(|_| rng.random_range(0..=k)).collect();
        let f = macro_f1(&pred, &truth, k).map(|v| (v - brute_macro_f1(&pred, &truth, k)).abs());
        for (w, r) in worst.iter_mut().zip([a, o, f]) {
            *w = w.max(r.unwrap_or(f64::INFINITY));
        }
    }
    let trivia = auroc(&[0.9, 0.8], &[0.1, 0.2]).ok() == Some(1.0) && auroc(&[0.5; 3], &[0.5; 5]).ok() == Some(0.5);
    let mut out: Vec<CheckOutcome> = ["auroc", "oscr", "macro-f1"]
        .iter()
        .zip(worst)
        .map(|(n, w)| {
            CheckOutcome::new(
                &format!("{n} oracle"),
                w <= METRIC_TOL,
                format!("max deviation {w:.2e} over {cases} inputs"),
            )
        })
        .collect();
    out.push(CheckOutcome::new("auroc trivia", trivia, "perfect -> 1, all ties -> 0.5".into()));
    out
}

/// Unit norm of embeddings through a random network.
pub fn check_unit_norm(cases: u64) -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let params = match init_params(&ModelShape::new(6, vec![8], 4, 2), seed) {
            Ok(p) => p,
            Err(e) => return CheckOutcome::new("unit-norm embeddings", false, e.to_string()),
        };
        let mut rng = rng::seeded(seed);
        let x = gaussian(10, 6, &mut rng) * 10.0;
        match embed(&params, &x) {
            Ok((z, _)) => {
                for r in z.outer_iter() {
                    worst = worst.max((r.dot(&r).sqrt() - 1.0).abs());
                }
            }
            Err(e) => return CheckOutcome::new("unit-norm embeddings", false, e.to_string()),
        }
    }
    CheckOutcome::new("unit-norm embeddings", worst < 1e-12, format!("max |norm - 1| {worst:.1e}"))
}

/// Every check, as run by the `verify` command.
pub fn run_all() -> VerifyReport {
    let start = Instant::now();
    let mut checks = check_gradients(20);
    checks.push(check_reduction(100));
    checks.extend(check_decomposition(100));
    checks.push(check_situations());
    checks.extend(check_metrics(100));
    checks.push(check_unit_norm(20));
    VerifyReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Adds `2 g_tau / t` to each anchor row, i.e. flips the sign of the
/// universum push. Test fixture for the mutation check.
pub fn flip_tau_sign(grad_z: &mut Array2<f64>, anchors: &[crate::loss::AnchorDecomposition]) {
    for a in anchors {
        let delta: Array1<f64> = &a.g_tau * (2.0 / a.temperature);
        let mut row = grad_z.row_mut(a.anchor);
        row += &delta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_all();
        assert!(report.all_passed(), "{}", report.render());
    }

    #[test]
    fn sign_flip_in_tau_push_is_caught() {
        let f = random_fixture(3, 16, 8, 4, PseudoLabelScheme::KPlusK);
        let mutated = |z: ArrayView2<f64>, u: ArrayView2<f64>| {
            let (mut r, d) = dc_known_loss_grad(z, &f.labels, u, &f.u_labels, f.pairing, &f.config)?;
            flip_tau_sign(&mut r.grad_z, &d.anchors);
            Ok((r.value, r.grad_z, r.grad_u))
        };
        let err = fd_check_embeddings(&mutated, &f.z, &f.u, FD_STEP).unwrap();
        assert!(err > GRAD_TOL, "mutation went unnoticed: {err:.2e}");
        let honest = &fixture_losses(&f)[1].1;
        assert!(fd_check_embeddings(honest.as_ref(), &f.z, &f.u, FD_STEP).unwrap() < GRAD_TOL);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
