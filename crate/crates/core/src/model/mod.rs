//! Dense encoder `E`, projection head `psi` and classifier `f`, with explicit
//! forward and backward passes.
//!
//! Contrastive embeddings are `z = psi(E(x)) / |psi(E(x))|`; classifier logits
//! are `f(E(x))`, without the projection head.

pub mod checkpoint;
pub mod optim;
pub mod train;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Fully connected layer, `y = x W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn he_uniform(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || rng.random_range(-bound..bound)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Stack of dense layers with ReLU between them, and after the last one when
/// `relu_last` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

/// Per-layer forward cache.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
}

impl Mlp {
    fn relu_after(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_last
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, Dense::outputs)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if self.relu_after(l) {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<LayerCache>) {
        let mut h = x.clone();
        let mut cache = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = h.dot(&layer.weight) + &layer.bias;
            let out = if self.relu_after(l) {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            cache.push(LayerCache { input: h, pre });
            h = out;
        }
        (h, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward(&self, cache: &[LayerCache], d_out: Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let mut d = d_out;
        for l in (0..self.layers.len()).rev() {
            let c = &cache[l];
            if self.relu_after(l) {
                d.zip_mut_with(&c.pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            grads.layers[l].weight += &c.input.t().dot(&d);
            grads.layers[l].bias += &d.sum_axis(Axis(0));
            d = d.dot(&self.layers[l].weight.t());
        }
        d
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            relu_last: self.relu_last,
        }
    }
}

/// Layer widths of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Encoder hidden widths. Empty makes the encoder the identity map.
    pub hidden: Vec<usize>,
    pub proj_dim: usize,
    /// Hidden widths of the classifier; empty for a single linear layer.
    pub classifier_hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, hidden: Vec<usize>, proj_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            proj_dim,
            classifier_hidden: Vec::new(),
            classes,
        }
    }

    /// Encoder output width `D_E`.
    pub fn encoded_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.proj_dim, self.classes];
        if dims.iter().chain(&self.hidden).chain(&self.classifier_hidden).any(|&d| d == 0) {
            return Err(Error::invalid(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Encoder, projection head and classifier weights. Also used as the
/// container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub projection: Mlp,
    pub classifier: Mlp,
}

/// Parameter subsets an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    EncoderAndProjection,
    Classifier,
}

fn chain(widths: &[usize], rng: &mut rng::Rng) -> Vec<Dense> {
    widths.windows(2).map(|w| Dense::he_uniform(w[0], w[1], rng)).collect()
}

/// He-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(shape: &ModelShape, seed: u64) -> Result<ModelParams> {
    shape.validate()?;
    let mut rng = rng::stream(seed, Stream::Init, 0);
    let enc_widths: Vec<usize> = std::iter::once(shape.input_dim).chain(shape.hidden.iter().copied()).collect();
    let d_e = shape.encoded_dim();
    let mut cls_widths = vec![d_e];
    cls_widths.extend(&shape.classifier_hidden);
    cls_widths.push(shape.classes);
    Ok(ModelParams {
        encoder: Mlp {
            layers: chain(&enc_widths, &mut rng),
            relu_last: true,
        },
        projection: Mlp {
            layers: chain(&[d_e, d_e, shape.proj_dim], &mut rng),
            relu_last: false,
        },
        classifier: Mlp {
            layers: chain(&cls_widths, &mut rng),
            relu_last: false,
        },
    })
}

/// Cached activations of one [`embed`] call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    encoder: Vec<LayerCache>,
    projection: Vec<LayerCache>,
    /// Unnormalised projection `p`.
    pub projected: Array2<f64>,
    pub norms: Array1<f64>,
    pub embeddings: Array2<f64>,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder
            .layers
            .first()
            .or(self.projection.layers.first())
            .map_or(0, Dense::inputs)
    }

    pub fn classes(&self) -> usize {
        self.classifier.layers.last().map_or(0, Dense::outputs)
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            projection: self.projection.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    fn group_mlps(&self) -> [(&'static str, &Mlp); 3] {
        [
            ("encoder", &self.encoder),
            ("projection", &self.projection),
            ("classifier", &self.classifier),
        ]
    }

    /// Named parameter blocks in a fixed order, as `(name, shape, values)`.
    pub fn named_blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, mlp) in self.group_mlps() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().expect("standard layout")));
                out.push((format!("{name}.{i}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("standard layout")));
            }
        }
        out
    }

    /// Flat views of every parameter block, in [`ModelParams::named_blocks`] order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.named_blocks().into_iter().map(|b| b.2).collect()
    }

    /// Mutable blocks of `group`, each with its index into [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self, group: ParamGroup) -> Vec<(usize, &mut [f64])> {
        let mut out = Vec::new();
        let mut index = 0;
        let take = |g: usize| match group {
            ParamGroup::All => true,
            ParamGroup::EncoderAndProjection => g < 2,
            ParamGroup::Classifier => g == 2,
        };
        for (g, mlp) in [&mut self.encoder, &mut self.projection, &mut self.classifier].into_iter().enumerate() {
            for l in mlp.layers.iter_mut() {
                if take(g) {
                    out.push((index, l.weight.as_slice_mut().expect("standard layout")));
                    out.push((index + 1, l.bias.as_slice_mut().expect("standard layout")));
                }
                index += 2;
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// In-place `self += alpha * other` over every block.
    pub fn scaled_add(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.blocks();
        for (i, dst) in self.blocks_mut(ParamGroup::All) {
            for (d, s) in dst.iter_mut().zip(src[i]) {
                *d += alpha * s;
            }
        }
    }

    fn check_input(&self, inputs: &Array2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encoder output `E(x)`.
    pub fn encode(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        Ok(self.encoder.forward(inputs))
    }
}

/// Unit-norm contrastive embeddings and the trace needed for backprop.
///
/// A row whose projection is exactly zero maps to the first basis vector
/// and passes no gradient back.
pub fn embed(params: &ModelParams, inputs: &Array2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
    params.check_input(inputs)?;
    let (encoded, encoder) = params.encoder.forward_cached(inputs);
    let (projected, projection) = params.projection.forward_cached(&encoded);
    let norms: Array1<f64> = projected.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut embeddings = projected.clone();
    for (mut row, &n) in embeddings.outer_iter_mut().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    let trace = ForwardTrace {
        encoder,
        projection,
        projected,
        norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, trace))
}

/// Parameter gradients for an upstream gradient `dL/dz` on the embeddings of
/// `trace`. Classifier entries are zero.
pub fn backprop_embedding(params: &ModelParams, trace: &ForwardTrace, d_z: &Array2<f64>) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backprop_embedding_into(params, trace, d_z, &mut grads)?;
    Ok(grads)
}

/// As [`backprop_embedding`], accumulating into `grads`.
pub fn backprop_embedding_into(params: &ModelParams, trace: &ForwardTrace, d_z: &Array2<f64>, grads: &mut ModelParams) -> Result<()> {
    if d_z.shape() != trace.embeddings.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match embeddings {:?}",
            d_z.shape(),
            trace.embeddings.shape()
        )));
    }
    // dz/dp = (I - z z^T) / |p|
    let mut d_p = d_z.clone();
    for ((mut g, z), &n) in d_p.outer_iter_mut().zip(trace.embeddings.outer_iter()).zip(&trace.norms) {
        if n > 0.0 {
            let along = g.dot(&z);
            g.scaled_add(-along, &z);
            g /= n;
        } else {
            g.fill(0.0);
        }
    }
    let d_enc = params.projection.backward(&trace.projection, d_p, &mut grads.projection);
    params.encoder.backward(&trace.encoder, d_enc, &mut grads.encoder);
    Ok(())
}

/// Classifier logits `f(E(x))`.
pub fn classify(params: &ModelParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    let encoded = params.encode(inputs)?;
    Ok(params.classifier.forward(&encoded))
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy of `logits` against 1-based `labels`, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(Error::invalid("cross entropy needs one label per logit row"));
    }
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::invalid(format!("label {bad} outside 1..={k}")));
    }
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    let mut value = 0.0;
    for (r, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        value += lse - row[y - 1];
        grad[[r, y - 1]] -= 1.0;
    }
    grad /= n;
    Ok((value / n, grad))
}

/// Cross-entropy gradients of the classifier (and, unless `frozen`, the
/// encoder).
pub fn classifier_loss_grad(params: &ModelParams, inputs: &Array2<f64>, labels: &[usize], frozen: bool) -> Result<(f64, ModelParams)> {
    params.check_input(inputs)?;
    let (encoded, enc_cache) = params.encoder.forward_cached(inputs);
    let (logits, cls_cache) = params.classifier.forward_cached(&encoded);
    let (value, d_logits) = cross_entropy(&logits, labels)?;
    let mut grads = params.zeros_like();
    let d_enc = params.classifier.backward(&cls_cache, d_logits, &mut grads.classifier);
    if !frozen {
        params.encoder.backward(&enc_cache, d_enc, &mut grads.encoder);
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn toy() -> ModelParams {
        init_params(&ModelShape::new(5, vec![6, 4], 3, 3), 11).unwrap()
    }

    fn inputs(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut r))
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let shape = ModelShape::new(8, vec![64, 64], 16, 6);
        let a = init_params(&shape, 3).unwrap();
        let b = init_params(&shape, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&shape, 4).unwrap());
        assert_eq!(a.encoder.layers[0].weight.shape(), &[8, 64]);
        assert_eq!(a.encoder.layers[1].weight.shape(), &[64, 64]);
        assert_eq!(a.projection.layers[1].weight.shape(), &[64, 16]);
        assert_eq!(a.classifier.layers[0].weight.shape(), &[64, 6]);
    }

    #[test]
    fn linear_encoder_and_zero_dims() {
        let p = init_params(&ModelShape::new(4, vec![], 2, 3), 0).unwrap();
        assert!(p.encoder.layers.is_empty());
        assert_eq!(p.input_dim(), 4);
        let x = inputs(3, 4, 0);
        assert_eq!(p.encode(&x).unwrap(), x);
        assert!(init_params(&ModelShape::new(0, vec![], 2, 3), 0).is_err());
        assert!(init_params(&ModelShape::new(4, vec![0], 2, 3), 0).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let p = toy();
        let x = inputs(20, 5, 1) * 50.0;
        let (z, _) = embed(&p, &x).unwrap();
        for row in z.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_embed_identically() {
        let p = toy();
        let x = inputs(1, 5, 2);
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let (z, _) = embed(&p, &xx).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn embed_rejects_bad_input() {
        let p = toy();
        assert!(matches!(embed(&p, &Array2::zeros((2, 4))), Err(Error::InvalidArgument(_))));
        let mut x = inputs(2, 5, 0);
        x[[1, 2]] = f64::NAN;
        assert!(matches!(embed(&p, &x), Err(Error::NumericInput(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = toy();
        let x = inputs(4, 5, 3);
        let (z, trace) = embed(&p, &x).unwrap();
        let g = backprop_embedding(&p, &trace, &Array2::zeros(z.raw_dim())).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(backprop_embedding(&p, &trace, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn radial_upstream_is_annihilated() {
        let p = toy();
        let x = inputs(3, 5, 4);
        let (z, trace) = embed(&p, &x).unwrap();
        // each upstream row is a multiple of its embedding
        let d = &z * 2.5;
        let g = backprop_embedding(&p, &trace, &d).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v.abs() < 1e-12)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = toy();
        let logits = classify(&p, &inputs(10, 5, 5)).unwrap();
        for row in softmax(&logits).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_posterior() {
        let mut p = toy();
        for l in &mut p.classifier.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let post = softmax(&classify(&p, &inputs(4, 5, 6)).unwrap());
        assert!(post.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn confident_correct_prediction_has_zero_cross_entropy() {
        let logits = array![[0.0, 800.0, 0.0]];
        let (v, g) = cross_entropy(&logits, &[2]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x.abs() < 1e-300));
        assert!(cross_entropy(&logits, &[4]).is_err());
    }

    #[test]
    fn block_indices_line_up() {
        let mut p = toy();
        let sizes: Vec<usize> = p.blocks().iter().map(|b| b.len()).collect();
        for (i, b) in p.blocks_mut(ParamGroup::All) {
            assert_eq!(b.len(), sizes[i]);
        }
        let cls: Vec<usize> = p.blocks_mut(ParamGroup::Classifier).into_iter().map(|b| b.0).collect();
        assert_eq!(cls, vec![sizes.len() - 2, sizes.len() - 1]);
        assert_eq!(p.blocks_mut(ParamGroup::EncoderAndProjection).len(), sizes.len() - 2);
    }
}
