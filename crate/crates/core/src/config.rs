//! Experiment configuration.
//!
//! A config file is flat TOML: one `key = value` per line, `#` comments.
//! Every key is optional and falls back to the default listed on
//! [`TrainConfig`]; unknown keys are rejected. Command-line overrides of the
//! form `key=value` are applied on top of the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossConfig, Pairing};
use crate::model::optim::{OptimizerConfig, OptimizerKind};
use crate::model::ModelShape;
use crate::openset::{ThresholdMode, ThresholdRows};
use crate::universum::PseudoLabelScheme;

/// Which universum, if any, joins the contrastive step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniversumScheme {
    /// One pseudo-unknown class per known class.
    KPlusK,
    /// All universum rows share one pseudo-unknown class.
    KPlusOne,
    /// Plain supervised contrastive learning, no universum.
    None,
}

impl UniversumScheme {
    pub fn pseudo_labels(self) -> Option<PseudoLabelScheme> {
        match self {
            Self::KPlusK => Some(PseudoLabelScheme::KPlusK),
            Self::KPlusOne => Some(PseudoLabelScheme::KPlusOne),
            Self::None => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::KPlusK => "k_plus_k",
            Self::KPlusOne => "k_plus_one",
            Self::None => "none",
        }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed for data, split, init and training streams. Default 0.
    pub seed: u64,

    /// Total blob classes. Default 10.
    pub classes: usize,
    /// Number of classes drawn as known. Default 6.
    pub known_classes: usize,
    /// Rows per class. Default 100.
    pub per_class: usize,
    /// Feature dimension. Default 8.
    pub dim: usize,
    /// Blob standard deviation. Default 1.5.
    pub spread: f64,
    /// Share of each known class held out for testing. Default 0.3.
    pub test_fraction: f64,

    /// Anchor weight of targeted mixup, in [0, 1]. Default 0.5.
    pub lambda: f64,
    /// Weight of the universum-side loss term. Default 1.0.
    pub gamma: f64,
    /// Contrastive temperature. Default 0.1.
    pub temperature: f64,
    /// `k_plus_k`, `k_plus_one` or `none`. Default `k_plus_k`.
    pub scheme: UniversumScheme,
    /// Include the universum-side loss term. Default true.
    pub universum_term: bool,

    /// Contrastive epochs. Default 600.
    pub epochs_contrastive: usize,
    /// Classifier epochs. Default 20.
    pub epochs_classifier: usize,
    /// Default 128.
    pub batch_size: usize,
    /// Encoder hidden widths. Default [64, 64].
    pub hidden: Vec<usize>,
    /// Projection output width. Default 16.
    pub proj_dim: usize,
    /// Classifier hidden widths; empty is a linear classifier. Default [].
    pub classifier_hidden: Vec<usize>,
    /// Gaussian jitter std applied to training batches. Default 0.1.
    pub aug_sigma: f64,
    /// Stack a second jittered view of each batch. Default false.
    pub two_views: bool,
    /// Keep the encoder fixed while training the classifier. Default true.
    pub freeze_encoder: bool,

    /// `adam` or `sgd_momentum`. Default `adam`.
    pub optimizer: OptimizerKind,
    /// Contrastive-step base learning rate. Default 1e-3.
    pub learning_rate: f64,
    /// Classifier-step base learning rate. Default 1e-2.
    pub classifier_learning_rate: f64,
    /// Linear warmup epochs before cosine decay (contrastive step). Default 10.
    pub warmup_epochs: usize,
    /// Decoupled weight decay. Default 1e-4.
    pub weight_decay: f64,
    /// SGD momentum. Default 0.9.
    pub momentum: f64,

    /// Rejection threshold percentile, in (0, 100). Default 5.
    pub percentile: f64,
    /// `per_class` or `global`. Default `per_class`.
    pub threshold_mode: ThresholdMode,
    /// `correct` or `all` training rows feed the thresholds. Default `correct`.
    pub threshold_rows: ThresholdRows,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            known_classes: 6,
            per_class: 100,
            dim: 8,
            spread: 1.5,
            test_fraction: 0.3,
            lambda: crate::universum::DEFAULT_LAMBDA,
            gamma: crate::loss::DEFAULT_GAMMA,
            temperature: crate::loss::DEFAULT_TEMPERATURE,
            scheme: UniversumScheme::KPlusK,
            universum_term: true,
            epochs_contrastive: 600,
            epochs_classifier: 20,
            batch_size: 128,
            hidden: vec![64, 64],
            proj_dim: 16,
            classifier_hidden: Vec::new(),
            aug_sigma: 0.1,
            two_views: false,
            freeze_encoder: true,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            classifier_learning_rate: 1e-2,
            warmup_epochs: 10,
            weight_decay: 1e-4,
            momentum: 0.9,
            percentile: crate::openset::DEFAULT_PERCENTILE,
            threshold_mode: ThresholdMode::PerClass,
            threshold_rows: ThresholdRows::Correct,
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies a single `key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string (`scheme=k_plus_one`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    /// Applies overrides in order and validates the result once, so that
    /// related keys (`classes`, `known_classes`) can change together. On
    /// error `self` is left untouched.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(config_err)?;
        for assignment in assignments {
            let assignment = assignment.as_ref();
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            if !table.contains_key(key) {
                return Err(config_err(format!("unknown config key `{key}`")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let updated: Self = table.try_into().map_err(config_err)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_err(msg)) };
        check(self.seed <= i64::MAX as u64, "seed must fit in a signed 64-bit integer")?;
        check(self.classes >= 2, "classes must be >= 2")?;
        check(
            self.known_classes >= 2 && self.known_classes < self.classes,
            "known_classes must satisfy 2 <= known_classes < classes",
        )?;
        check(self.per_class >= 2, "per_class must be >= 2")?;
        check(self.dim >= 2, "dim must be >= 2")?;
        check(self.spread.is_finite() && self.spread >= 0.0, "spread must be >= 0")?;
        check(self.test_fraction > 0.0 && self.test_fraction < 1.0, "test_fraction must lie in (0, 1)")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]")?;
        check(self.gamma.is_finite() && self.gamma >= 0.0, "gamma must be >= 0")?;
        check(self.temperature.is_finite() && self.temperature > 0.0, "temperature must be > 0")?;
        check(self.batch_size >= 2, "batch_size must be >= 2")?;
        check(self.hidden.iter().all(|&h| h > 0), "hidden widths must be >= 1")?;
        check(self.classifier_hidden.iter().all(|&h| h > 0), "classifier_hidden widths must be >= 1")?;
        check(self.proj_dim >= 1, "proj_dim must be >= 1")?;
        check(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0, "aug_sigma must be >= 0")?;
        check(self.learning_rate.is_finite() && self.learning_rate > 0.0, "learning_rate must be > 0")?;
        check(
            self.classifier_learning_rate.is_finite() && self.classifier_learning_rate > 0.0,
            "classifier_learning_rate must be > 0",
        )?;
        check(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be >= 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check(self.percentile > 0.0 && self.percentile < 100.0, "percentile must lie in (0, 100)")?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            gamma: self.gamma,
            include_universum_term: self.universum_term,
        }
    }

    pub fn pairing(&self) -> Option<Pairing> {
        self.scheme.pseudo_labels().map(|scheme| Pairing {
            known_classes: self.known_classes,
            scheme,
        })
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.dim,
            hidden: self.hidden.clone(),
            proj_dim: self.proj_dim,
            classifier_hidden: self.classifier_hidden.clone(),
            classes: self.known_classes,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            ..OptimizerConfig::default()
        }
    }
}
