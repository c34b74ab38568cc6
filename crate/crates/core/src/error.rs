use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("unknown condition {0}")]
    UnknownCondition(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("reference model must be frozen")]
    NotFrozen,
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("frozen base model was modified during fine-tuning")]
    FrozenBaseModified,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::TapeConsumed => "tape_consumed",
            Error::UnknownCondition(_) => "unknown_condition",
            Error::EmptyBatch => "empty_batch",
            Error::NotFrozen => "not_frozen",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Divergence { .. } => "divergence",
            Error::FrozenBaseModified => "frozen_base_modified",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config { .. } => "config",
            Error::MissingFile(_) => "missing_file",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
