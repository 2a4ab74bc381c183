//! Analytic gradients against finite differences of loss values computed
//! here with plain loops, plus structural identities of the dual loss.

use dctau::loss::{
    dc_known_loss_grad, dc_total_loss_grad, dc_universum_loss_grad, hard_negative_weights, normalize_rows,
    supcon_loss_grad, LossConfig, Pairing, WeightSource,
};
use dctau::model::{backprop_embedding, classifier_loss_grad, classify, embed, init_params, ModelParams, ModelShape, ParamGroup};
use dctau::rng::{self, Rng};
use dctau::universum::PseudoLabelScheme;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

fn gaussian(rows: usize, cols: usize, r: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(r))
}

fn unit_rows(rows: usize, cols: usize, r: &mut Rng) -> Array2<f64> {
    normalize_rows(&gaussian(rows, cols, r))
}

/// Labels 1..=k, each used at least twice.
fn labels(rows: usize, k: usize, r: &mut Rng) -> Vec<usize> {
    let mut out: Vec<usize> = (0..rows).map(|i| i % k + 1).collect();
    for i in (1..rows).rev() {
        out.swap(i, r.random_range(0..=i));
    }
    out
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Direct evaluation of the anchor-summed contrastive objective.
fn oracle(a: ArrayView2<f64>, ya: &[usize], c: ArrayView2<f64>, linked: &dyn Fn(usize, usize) -> bool, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.nrows() {
        let pos: Vec<usize> = (0..a.nrows()).filter(|&p| p != i && ya[p] == ya[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for k in 0..a.nrows() {
            if k != i {
                s += (a.row(i).dot(&a.row(k)) / t).exp();
            }
        }
        for j in 0..c.nrows() {
            if linked(i, j) {
                s += (a.row(i).dot(&c.row(j)) / t).exp();
            }
        }
        let mut term = 0.0;
        for &p in &pos {
            term -= ((a.row(i).dot(&a.row(p)) / t).exp() / s).ln();
        }
        total += term / pos.len() as f64;
    }
    total
}

fn central_diff(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + H;
        let up = f(&xp);
        xp[[r, c]] = orig - H;
        let down = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * H);
    }
    g
}

struct Case {
    z: Array2<f64>,
    y: Vec<usize>,
    u: Array2<f64>,
    yu: Vec<usize>,
    k: usize,
    cfg: LossConfig,
}

fn case(seed: u64, scheme: PseudoLabelScheme) -> Case {
    let mut r = rng::seeded(seed);
    let k = r.random_range(2..=4);
    let n = r.random_range(2 * k..=16);
    let dim = r.random_range(3..=8);
    let y = labels(n, k, &mut r);
    let m = r.random_range(2 * k..=12);
    let yu = match scheme {
        PseudoLabelScheme::KPlusK => labels(m, k, &mut r).into_iter().map(|l| l + k).collect(),
        PseudoLabelScheme::KPlusOne => vec![k + 1; m],
    };
    Case {
        z: unit_rows(n, dim, &mut r),
        y,
        u: unit_rows(m, dim, &mut r),
        yu,
        k,
        cfg: LossConfig {
            temperature: r.random_range(0.2..1.0),
            gamma: r.random_range(0.5..2.0),
            include_universum_term: true,
        },
    }
}

fn pairing(c: &Case, scheme: PseudoLabelScheme) -> Pairing {
    Pairing { known_classes: c.k, scheme }
}

fn link_known(c: &Case, p: Pairing) -> impl Fn(usize, usize) -> bool + '_ {
    move |i, j| p.links(c.y[i], c.yu[j])
}

#[test]
fn supcon_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let c = case(seed, PseudoLabelScheme::KPlusK);
        let t = c.cfg.temperature;
        let res = supcon_loss_grad(c.z.view(), &c.y, &c.cfg).unwrap();
        let empty = Array2::<f64>::zeros((0, c.z.ncols()));
        let f = |z: &Array2<f64>| oracle(z.view(), &c.y, empty.view(), &|_, _| false, t);
        assert!((res.value - f(&c.z)).abs() < 1e-10 * res.value.abs().max(1.0));
        let e = rel_err(&res.grad_z, &central_diff(&c.z, &f));
        assert!(e < FD_TOL, "seed {seed}: {e}");
    }
}

#[test]
fn dual_terms_match_finite_differences() {
    for seed in 0..10 {
        for scheme in [PseudoLabelScheme::KPlusK, PseudoLabelScheme::KPlusOne] {
            let c = case(100 + seed, scheme);
            let p = pairing(&c, scheme);
            let t = c.cfg.temperature;
            let (known, _) = dc_known_loss_grad(c.z.view(), &c.y, c.u.view(), &c.yu, p, &c.cfg).unwrap();
            let lk = |z: &Array2<f64>, u: &Array2<f64>| oracle(z.view(), &c.y, u.view(), &link_known(&c, p), t);
            assert!((known.value - lk(&c.z, &c.u)).abs() < 1e-10 * known.value.abs().max(1.0));
            assert!(rel_err(&known.grad_z, &central_diff(&c.z, &|z| lk(z, &c.u))) < FD_TOL);
            assert!(rel_err(&known.grad_u, &central_diff(&c.u, &|u| lk(&c.z, u))) < FD_TOL);

            let uni = dc_universum_loss_grad(c.u.view(), &c.yu, c.z.view(), &c.y, p, &c.cfg).unwrap();
            let link_u = |i: usize, j: usize| p.links(c.y[j], c.yu[i]);
            let lu = |z: &Array2<f64>, u: &Array2<f64>| oracle(u.view(), &c.yu, z.view(), &link_u, t);
            assert!((uni.value - lu(&c.z, &c.u)).abs() < 1e-10 * uni.value.abs().max(1.0));
            assert!(rel_err(&uni.grad_z, &central_diff(&c.z, &|z| lu(z, &c.u))) < FD_TOL);
            assert!(rel_err(&uni.grad_u, &central_diff(&c.u, &|u| lu(&c.z, u))) < FD_TOL);
        }
    }
}

#[test]
fn gamma_enters_linearly() {
    for seed in 0..10 {
        let c = case(200 + seed, PseudoLabelScheme::KPlusK);
        let p = pairing(&c, PseudoLabelScheme::KPlusK);
        let (known, _) = dc_known_loss_grad(c.z.view(), &c.y, c.u.view(), &c.yu, p, &c.cfg).unwrap();
        let uni = dc_universum_loss_grad(c.u.view(), &c.yu, c.z.view(), &c.y, p, &c.cfg).unwrap();
        for gamma in [0.25, 0.5, 1.0, 3.0] {
            let cfg = LossConfig { gamma, ..c.cfg };
            let total = dc_total_loss_grad(c.z.view(), &c.y, c.u.view(), &c.yu, p, &cfg).unwrap();
            let expect = known.value + gamma * uni.value;
            let tol = if gamma == 1.0 { 1e-12 } else { 1e-10 };
            assert!((total.value - expect).abs() <= tol * expect.abs().max(1.0), "gamma {gamma}");
            let gz = &known.grad_z + &(gamma * &uni.grad_z);
            assert!((&total.grad_z - &gz).iter().all(|d| d.abs() <= tol));
        }
        let off = LossConfig { include_universum_term: false, ..c.cfg };
        let only_known = dc_total_loss_grad(c.z.view(), &c.y, c.u.view(), &c.yu, p, &off).unwrap();
        assert_eq!(only_known.value, known.value);
    }
}

#[test]
fn exchanging_roles_exchanges_the_terms() {
    // With a single known class both schemes link everything, so the
    // universum term is the known term with the two sets swapped.
    let mut r = rng::seeded(5);
    for _ in 0..10 {
        let z = unit_rows(6, 4, &mut r);
        let u = unit_rows(5, 4, &mut r);
        let cfg = LossConfig { temperature: 0.3, ..LossConfig::default() };
        let p = Pairing::targeted(1);
        let uni = dc_universum_loss_grad(u.view(), &[2; 5], z.view(), &[1; 6], p, &cfg).unwrap();
        let (swapped, _) = dc_known_loss_grad(u.view(), &[1; 5], z.view(), &[2; 6], p, &cfg).unwrap();
        assert!((uni.value - swapped.value).abs() < 1e-12);
        assert!(rel_err(&uni.grad_u, &swapped.grad_z) < 1e-12);
        assert!(rel_err(&uni.grad_z, &swapped.grad_u) < 1e-12);
    }
}

#[test]
fn unlinked_universum_leaves_supcon_unchanged() {
    let mut r = rng::seeded(8);
    let z = unit_rows(8, 5, &mut r);
    let y = vec![1, 2, 1, 2, 1, 2, 1, 2];
    let cfg = LossConfig::default();
    let plain = supcon_loss_grad(z.view(), &y, &cfg).unwrap();
    // class 3 is known but absent from the batch, so its universum rows link nowhere
    let u = unit_rows(4, 5, &mut r);
    let (dual, _) = dc_known_loss_grad(z.view(), &y, u.view(), &[6; 4], Pairing::targeted(3), &cfg).unwrap();
    assert_eq!(dual.value, plain.value);
    assert_eq!(dual.grad_z, plain.grad_z);
    assert!(dual.grad_u.iter().all(|&g| g == 0.0));
}

#[test]
fn adding_a_linked_universum_row_raises_only_its_class_terms() {
    let mut r = rng::seeded(13);
    for _ in 0..10 {
        let z = unit_rows(9, 4, &mut r);
        let y = vec![1, 2, 3, 1, 2, 3, 1, 2, 3];
        let u = unit_rows(3, 4, &mut r);
        let yu = vec![4, 5, 6];
        let p = Pairing::targeted(3);
        let cfg = LossConfig::default();
        let (before, db) = dc_known_loss_grad(z.view(), &y, u.view(), &yu, p, &cfg).unwrap();
        let mut u2 = u.clone();
        u2.push_row(unit_rows(1, 4, &mut r).row(0)).unwrap();
        let yu2 = vec![4, 5, 6, 5];
        let (after, da) = dc_known_loss_grad(z.view(), &y, u2.view(), &yu2, p, &cfg).unwrap();
        assert!(after.value > before.value);
        for (a, b) in da.anchors.iter().zip(&db.anchors) {
            if y[a.anchor] == 2 {
                assert!(a.normalizer > b.normalizer);
            } else {
                assert_eq!(a.normalizer, b.normalizer);
            }
        }
    }
}

#[test]
fn harder_negatives_carry_more_weight() {
    let mut r = rng::seeded(21);
    let z = unit_rows(10, 6, &mut r);
    let y = vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2];
    let u = unit_rows(6, 6, &mut r);
    let yu = vec![3, 4, 3, 4, 3, 4];
    let (_, d) = dc_known_loss_grad(z.view(), &y, u.view(), &yu, Pairing::targeted(2), &LossConfig::default()).unwrap();
    for a in &d.anchors {
        let zi = z.row(a.anchor);
        let mut pairs: Vec<(f64, f64)> = hard_negative_weights(a)
            .into_iter()
            .map(|w| {
                let sim = match w.source {
                    WeightSource::Known { row, .. } => zi.dot(&z.row(row)),
                    WeightSource::Universum { row } => zi.dot(&u.row(row)),
                };
                (sim, w.weight)
            })
            .collect();
        assert!((pairs.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}

fn jittered(shape: &ModelShape, seed: u64) -> ModelParams {
    let mut params = init_params(shape, seed).unwrap();
    let mut r = rng::seeded(seed + 1000);
    let names: Vec<bool> = params.named_blocks().iter().map(|b| b.0.ends_with("bias")).collect();
    for (i, block) in params.blocks_mut(ParamGroup::All) {
        if names[i] {
            for b in block.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut r);
                *b = 0.1 * n;
            }
        }
    }
    params
}

fn network_fd(params: &ModelParams, group: ParamGroup, f: &dyn Fn(&ModelParams) -> f64) -> Vec<Vec<f64>> {
    let mut work = params.clone();
    let sizes: Vec<(usize, usize)> = work.blocks_mut(group).into_iter().map(|(i, b)| (i, b.len())).collect();
    let mut out = vec![Vec::new(); params.blocks().len()];
    for (block, len) in sizes {
        for e in 0..len {
            let set = |w: &mut ModelParams, v: f64| {
                for (i, b) in w.blocks_mut(group) {
                    if i == block {
                        b[e] = v;
                    }
                }
            };
            let orig = params.blocks()[block][e];
            set(&mut work, orig + H);
            let up = f(&work);
            set(&mut work, orig - H);
            let down = f(&work);
            set(&mut work, orig);
            out[block].push((up - down) / (2.0 * H));
        }
    }
    out
}

fn flat_rel_err(analytic: &ModelParams, numeric: &[Vec<f64>]) -> f64 {
    let a: Vec<f64> = analytic.blocks().iter().zip(numeric).filter(|(_, n)| !n.is_empty()).flat_map(|(b, _)| b.iter().copied()).collect();
    let n: Vec<f64> = numeric.iter().flatten().copied().collect();
    let a = Array2::from_shape_vec((1, a.len()), a).unwrap();
    let n = Array2::from_shape_vec((1, n.len()), n).unwrap();
    rel_err(&a, &n)
}

#[test]
fn embedding_backprop_matches_finite_differences() {
    let shape = ModelShape::new(5, vec![7, 6], 4, 3);
    for seed in 0..5 {
        let params = jittered(&shape, seed);
        let mut r = rng::seeded(seed + 50);
        let x = gaussian(6, 5, &mut r);
        let weight = gaussian(6, 4, &mut r);
        let (_, trace) = embed(&params, &x).unwrap();
        let analytic = backprop_embedding(&params, &trace, &weight).unwrap();
        let f = |p: &ModelParams| (&embed(p, &x).unwrap().0 * &weight).sum();
        let numeric = network_fd(&params, ParamGroup::EncoderAndProjection, &f);
        let e = flat_rel_err(&analytic, &numeric);
        assert!(e < FD_TOL, "seed {seed}: {e}");
    }
}

#[test]
fn cross_entropy_backprop_matches_finite_differences() {
    let shape = ModelShape::new(5, vec![7], 4, 3);
    for seed in 0..5 {
        let params = jittered(&shape, 10 + seed);
        let mut r = rng::seeded(seed + 70);
        let x = gaussian(8, 5, &mut r);
        let y: Vec<usize> = (0..8).map(|i| i % 3 + 1).collect();
        let ce = |p: &ModelParams| {
            let logits = classify(p, &x).unwrap();
            let mut total = 0.0;
            for (row, &label) in logits.outer_iter().zip(&y) {
                let norm: f64 = row.iter().map(|v| v.exp()).sum();
                total -= (row[label - 1].exp() / norm).ln();
            }
            total / y.len() as f64
        };
        let (value, analytic) = classifier_loss_grad(&params, &x, &y, false).unwrap();
        assert!((value - ce(&params)).abs() < 1e-12);
        let numeric = network_fd(&params, ParamGroup::All, &ce);
        let e = flat_rel_err(&analytic, &numeric);
        assert!(e < FD_TOL, "seed {seed}: {e}");

        let (_, frozen) = classifier_loss_grad(&params, &x, &y, true).unwrap();
        assert!(frozen.encoder.layers.iter().all(|l| l.weight.iter().all(|&g| g == 0.0)));
        assert_eq!(frozen.classifier, analytic.classifier);
    }
}
