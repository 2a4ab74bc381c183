use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps each variant onto a process exit code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("insufficient classes: need at least {needed}, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("could not draw a batch with at least two classes after {retries} attempts")]
    UnsatisfiableBatch { retries: usize },

    #[error("degenerate batch: no anchor has a positive")]
    DegenerateBatch,

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("non-finite value during {stage} training at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// 2 = invalid config/arguments, 3 = numeric failure, 4 = I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::InsufficientClasses { .. }
            | Error::UnsatisfiableBatch { .. } => 2,
            Error::DegenerateBatch
            | Error::NumericInput(_)
            | Error::NonFinite { .. }
            | Error::Verification(_) => 3,
            Error::Format { .. } | Error::Io(_) => 4,
        }
    }
}
