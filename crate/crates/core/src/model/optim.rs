//! Adam and SGD with momentum, both with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

/// Moment accumulators, one pair of buffers per parameter block.
///
/// SGD keeps its velocity in `first`; `second` stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: OptimizerConfig, params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        Self::new(config, &sizes)
    }

    /// One update of the listed `(block index, values)` pairs.
    ///
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step_blocks(&mut self, params: Vec<(usize, &mut [f64])>, grads: &[&[f64]], lr: f64) -> Result<()> {
        for (i, p) in &params {
            let g = grads.get(*i).ok_or_else(|| Error::invalid(format!("no gradient for block {i}")))?;
            if g.len() != p.len() || self.first.get(*i).map(Vec::len) != Some(p.len()) {
                return Err(Error::invalid(format!("shape mismatch in parameter block {i}")));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericInput(format!(
                    "non-finite gradient {} at block {i}, element {pos}",
                    g[pos]
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params {
            let g = grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                let update = match c.kind {
                    OptimizerKind::Adam => {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        m_hat / (v_hat.sqrt() + c.eps)
                    }
                    OptimizerKind::SgdMomentum => {
                        m[j] = c.momentum * m[j] + g[j];
                        m[j]
                    }
                };
                p[j] -= lr * (update + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to the `group` blocks of `params`.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut ModelParams, grads: &ModelParams, group: ParamGroup, lr: f64) -> Result<()> {
    let g = grads.blocks();
    state.step_blocks(params.blocks_mut(group), &g, lr)
}

/// Linear warmup over `warmup` epochs followed by cosine decay to zero at
/// `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize, warmup: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelShape};

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let shape = ModelShape::new(3, vec![4], 2, 2);
        let mut p = init_params(&shape, 0).unwrap();
        let before = p.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut s = OptimizerState::for_params(OptimizerConfig { kind, ..cfg }, &p);
            let g = p.zeros_like();
            optimizer_step(&mut s, &mut p, &g, ParamGroup::All, 0.1).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_scalar_steps_match_hand_evaluation() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut s = OptimizerState::new(cfg, &[1]);
        let mut p = [1.0];
        s.step_blocks(vec![(0, &mut p[..])], &[&[0.5]], 0.1).unwrap();
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        let expect1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expect1).abs() < 1e-15);

        s.step_blocks(vec![(0, &mut p[..])], &[&[-1.0]], 0.1).unwrap();
        let m: f64 = 0.9 * 0.05 + 0.1 * -1.0;
        let v: f64 = 0.999 * 0.00025 + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay_and_momentum() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            weight_decay: 1e-4,
            ..OptimizerConfig::default()
        };
        let mut s = OptimizerState::new(cfg, &[1]);
        let mut p = [2.0];
        s.step_blocks(vec![(0, &mut p[..])], &[&[1.0]], 0.5).unwrap();
        assert!((p[0] - (2.0 - 0.5 * (1.0 + 2e-4))).abs() < 1e-15);
        let p1 = p[0];
        s.step_blocks(vec![(0, &mut p[..])], &[&[1.0]], 0.5).unwrap();
        assert!((p[0] - (p1 - 0.5 * (1.9 + 1e-4 * p1))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = OptimizerState::new(OptimizerConfig::default(), &[2]);
        let mut p = [1.0, 2.0];
        let err = s.step_blocks(vec![(0, &mut p[..])], &[&[0.1, f64::NAN]], 0.1);
        assert!(matches!(err, Err(Error::NumericInput(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn classifier_group_leaves_encoder_alone() {
        let shape = ModelShape::new(3, vec![4], 2, 2);
        let mut p = init_params(&shape, 1).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, b) in g.blocks_mut(ParamGroup::All) {
            b.fill(1.0);
        }
        let mut s = OptimizerState::for_params(OptimizerConfig::default(), &p);
        optimizer_step(&mut s, &mut p, &g, ParamGroup::Classifier, 0.1).unwrap();
        assert_eq!(p.encoder, before.encoder);
        assert_eq!(p.projection, before.projection);
        assert_ne!(p.classifier, before.classifier);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1e-3, 0, 100, 10) - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 9, 100, 10) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 10, 100, 10) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 55, 100, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 99, 100, 10) < 1e-5);
        assert!((cosine_lr(1e-2, 0, 20, 0) - 1e-2).abs() < 1e-18);
    }
}
