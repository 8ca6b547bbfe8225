use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("not enough {polarity} pixels: need {needed}, have {available}")]
    InsufficientPixels {
        polarity: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("pooling mask is empty on the embedding grid")]
    EmptyPool,

    #[error("non-finite loss `{part}` = {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        part: &'static str,
        value: f64,
        epoch: usize,
        step: usize,
    },

    #[error("LoRA adapters are already attached")]
    AdaptersAlreadyAttached,

    #[error("operation requires decoder kind {expected}, model has {actual}")]
    WrongDecoder {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing ground-truth mask for frame `{0}`")]
    MissingMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::NoForeground => "no_foreground",
            Error::InsufficientPixels { .. } => "insufficient_pixels",
            Error::EmptyPool => "empty_pool",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::AdaptersAlreadyAttached => "adapters_already_attached",
            Error::WrongDecoder { .. } => "wrong_decoder",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::MissingMask(_) => "missing_mask",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Locked(_) => "locked",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
