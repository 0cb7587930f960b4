use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The dataset root does not have the expected `root/<class>/*` layout.
    #[error("dataset structure: {0}")]
    Structural(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("weights for `{weights_source}` unavailable at {path}: {reason}")]
    WeightsUnavailable {
        weights_source: String,
        path: PathBuf,
        reason: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("singular normal equations")]
    Singular,

    #[error("quantile solver did not converge after {steps} bisection steps")]
    NoConvergence { steps: usize },

    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("layer `{0}` is not a differentiable feature layer")]
    NotDifferentiable(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("corrupt run record {path}: {message}")]
    CorruptRecord { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::InvalidParameter(message.into())
    }
}
