//! Two-step training: contrastive representation learning, then a
//! cross-entropy classifier on the encoder output.
//!
//! Epoch `e` of either step draws all of its randomness from its own seeded
//! stream, so a run resumed from a checkpoint after `e` epochs continues
//! exactly as the uninterrupted run would.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{augment_gaussian, epoch_batches, Batch, OpenSplit};
use crate::error::{Error, Result};
use crate::loss::{dc_total_loss_grad, supcon_loss_grad};
use crate::model::optim::{cosine_lr, optimizer_step, OptimizerState};
use crate::model::{backprop_embedding_into, classifier_loss_grad, embed, init_params, ModelParams, ParamGroup};
use crate::rng::{self, Stream};
use crate::universum::{assign_pseudo_labels, make_universum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Contrastive,
    Classifier,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Contrastive => "contrastive",
            Stage::Classifier => "classifier",
        }
    }
}

/// Mean loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Anchors without a positive, summed over the epoch.
    pub skipped_anchors: usize,
    /// Batches in which no anchor had a positive.
    pub skipped_batches: usize,
}

/// Completed epochs per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub contrastive_epochs: usize,
    pub classifier_epochs: usize,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub contrastive_opt: OptimizerState,
    pub classifier_opt: OptimizerState,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
}

fn non_finite(stage: Stage, epoch: usize, batch: usize, detail: impl Into<String>) -> Error {
    Error::NonFinite {
        stage: stage.as_str(),
        epoch,
        batch,
        detail: detail.into(),
    }
}

fn tag_numeric(err: Error, stage: Stage, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NumericInput(detail) => non_finite(stage, epoch, batch, detail),
        other => other,
    }
}

impl TrainState {
    /// Fresh initialisation for `cfg`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.model_shape(), cfg.seed)?;
        let opt = OptimizerState::for_params(cfg.optimizer_config(), &params);
        Ok(Self {
            params,
            contrastive_opt: opt.clone(),
            classifier_opt: opt,
            progress: Progress::default(),
            history: Vec::new(),
        })
    }

    /// Runs the next contrastive epoch and returns its mean loss.
    pub fn run_contrastive_epoch(&mut self, split: &OpenSplit, cfg: &TrainConfig) -> Result<f64> {
        let stage = Stage::Contrastive;
        let epoch = self.progress.contrastive_epochs;
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs_contrastive, cfg.warmup_epochs);
        let mut rng = rng::stream(cfg.seed, Stream::Contrastive, epoch as u64);
        let loss_cfg = cfg.loss_config();
        let pairing = cfg.pairing();
        let known = split.known_classes();

        let batches = epoch_batches(&split.train, cfg.batch_size, &mut rng)?;
        let mut total = 0.0;
        let mut evaluated = 0usize;
        let mut skipped_anchors = 0;
        let mut skipped_batches = 0;
        for (b, batch) in batches.iter().enumerate() {
            let view = augment_gaussian(batch, cfg.aug_sigma, &mut rng)?;
            let view = if cfg.two_views {
                view.concat(&augment_gaussian(batch, cfg.aug_sigma, &mut rng)?)?
            } else {
                view
            };
            let (z, trace) = embed(&self.params, &view.features)?;
            let mut grads = self.params.zeros_like();
            let outcome = match pairing {
                Some(pairing) => {
                    let ub = make_universum(&view, known, cfg.lambda, &mut rng)?;
                    let ub = assign_pseudo_labels(ub, pairing.scheme);
                    let (u, u_trace) = embed(&self.params, &ub.features)?;
                    dc_total_loss_grad(z.view(), &view.labels, u.view(), &ub.labels, pairing, &loss_cfg).and_then(|res| {
                        backprop_embedding_into(&self.params, &u_trace, &res.grad_u, &mut grads)?;
                        Ok(res)
                    })
                }
                None => supcon_loss_grad(z.view(), &view.labels, &loss_cfg),
            };
            let res = match outcome {
                Ok(res) => res,
                Err(Error::DegenerateBatch) => {
                    log::debug!("epoch {epoch} batch {b}: no anchor has a positive, skipped");
                    skipped_batches += 1;
                    skipped_anchors += view.len();
                    continue;
                }
                Err(e) => return Err(tag_numeric(e, stage, epoch, b)),
            };
            if !res.value.is_finite() {
                return Err(non_finite(stage, epoch, b, format!("loss = {}", res.value)));
            }
            backprop_embedding_into(&self.params, &trace, &res.grad_z, &mut grads)?;
            optimizer_step(&mut self.contrastive_opt, &mut self.params, &grads, ParamGroup::EncoderAndProjection, lr)
                .map_err(|e| tag_numeric(e, stage, epoch, b))?;
            total += res.value;
            evaluated += 1;
            skipped_anchors += res.skipped_anchors;
        }
        if evaluated == 0 {
            return Err(Error::DegenerateBatch);
        }
        let mean = total / evaluated as f64;
        self.finish_epoch(stage, epoch, mean, lr, skipped_anchors, skipped_batches);
        Ok(mean)
    }

    /// Runs the next classifier epoch and returns its mean cross-entropy.
    pub fn run_classifier_epoch(&mut self, split: &OpenSplit, cfg: &TrainConfig) -> Result<f64> {
        let stage = Stage::Classifier;
        let epoch = self.progress.classifier_epochs;
        let lr = cosine_lr(cfg.classifier_learning_rate, epoch, cfg.epochs_classifier, 0);
        let mut rng = rng::stream(cfg.seed, Stream::Classifier, epoch as u64);
        let group = if cfg.freeze_encoder {
            ParamGroup::Classifier
        } else {
            ParamGroup::All
        };

        let batches: Vec<Batch> = epoch_batches(&split.train, cfg.batch_size, &mut rng)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (value, grads) = classifier_loss_grad(&self.params, &batch.features, &batch.labels, cfg.freeze_encoder)
                .map_err(|e| tag_numeric(e, stage, epoch, b))?;
            if !value.is_finite() {
                return Err(non_finite(stage, epoch, b, format!("loss = {value}")));
            }
            optimizer_step(&mut self.classifier_opt, &mut self.params, &grads, group, lr)
                .map_err(|e| tag_numeric(e, stage, epoch, b))?;
            total += value;
        }
        let mean = total / batches.len() as f64;
        self.finish_epoch(stage, epoch, mean, lr, 0, 0);
        Ok(mean)
    }

    fn finish_epoch(&mut self, stage: Stage, epoch: usize, loss: f64, lr: f64, skipped_anchors: usize, skipped_batches: usize) {
        log::info!("{} epoch {epoch}: loss {loss:.6} lr {lr:.3e}", stage.as_str());
        self.history.push(EpochRecord {
            stage,
            epoch,
            loss,
            learning_rate: lr,
            skipped_anchors,
            skipped_batches,
        });
        match stage {
            Stage::Contrastive => self.progress.contrastive_epochs += 1,
            Stage::Classifier => self.progress.classifier_epochs += 1,
        }
    }

    /// Trains until both steps reach their configured epoch counts. The
    /// classifier step only starts once the contrastive step is complete.
    pub fn run(&mut self, split: &OpenSplit, cfg: &TrainConfig) -> Result<()> {
        while self.progress.contrastive_epochs < cfg.epochs_contrastive {
            self.run_contrastive_epoch(split, cfg)?;
        }
        while self.progress.classifier_epochs < cfg.epochs_classifier {
            self.run_classifier_epoch(split, cfg)?;
        }
        Ok(())
    }

    /// Losses of one step, in epoch order.
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.history.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }
}

/// Contrastive step from a fresh initialisation.
pub fn train_contrastive(split: &OpenSplit, cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    let mut state = TrainState::new(cfg)?;
    while state.progress.contrastive_epochs < cfg.epochs_contrastive {
        state.run_contrastive_epoch(split, cfg)?;
    }
    let losses = state.losses(Stage::Contrastive);
    Ok((state.params, losses))
}

/// Classifier step on top of `params`, with a fresh optimizer.
pub fn train_classifier(params: ModelParams, split: &OpenSplit, cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    let opt = OptimizerState::for_params(cfg.optimizer_config(), &params);
    let mut state = TrainState {
        params,
        contrastive_opt: opt.clone(),
        classifier_opt: opt,
        progress: Progress {
            contrastive_epochs: cfg.epochs_contrastive,
            classifier_epochs: 0,
        },
        history: Vec::new(),
    };
    while state.progress.classifier_epochs < cfg.epochs_classifier {
        state.run_classifier_epoch(split, cfg)?;
    }
    let losses = state.losses(Stage::Classifier);
    Ok((state.params, losses))
}

/// Writes `stage,epoch,loss,learning_rate,skipped_anchors,skipped_batches`.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "stage,epoch,loss,learning_rate,skipped_anchors,skipped_batches")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.stage.as_str(),
            r.epoch,
            r.loss,
            r.learning_rate,
            r.skipped_anchors,
            r.skipped_batches
        )?;
    }
    Ok(())
}
