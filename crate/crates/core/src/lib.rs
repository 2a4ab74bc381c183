//! Open-set recognition with dual contrastive learning over target-aware
//! universum samples.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: synthetic Gaussian blobs, open-set splits, batching and jitter.
//! - [`universum`]: targeted mixup that turns each anchor into a pseudo-unknown
//!   sample of its own class-specific unknown class.
//! - [`loss`]: supervised contrastive loss and the two dual contrastive terms,
//!   with analytic gradients and their per-anchor decomposition.
//! - [`model`]: a small dense encoder, projection head and classifier with
//!   hand-written backprop, optimizers and the two-step trainer.
//! - [`openset`]: percentile thresholds and the accept/reject rule.
//! - [`metrics`]: AUROC, OSCR, macro-F1 and closed-set accuracy.
//! - [`config`], [`experiment`], [`verify`]: the experiment harness used by
//!   the `dctau` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod openset;
pub mod rng;
pub mod universum;
pub mod verify;

pub use error::{Error, Result};

/// Label used for rows of unknown classes, in memory and in CSV exports.
pub const UNKNOWN: usize = 0;
