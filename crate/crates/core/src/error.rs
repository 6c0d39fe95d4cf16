use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid label {label} at pixel {index} (classes: {classes})")]
    InvalidLabel { label: u8, index: usize, classes: usize },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported for this configuration: {0}")]
    Unsupported(String),

    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("target has no positive region to sample from")]
    NoPositiveRegion,

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("non-finite loss at episode {episode} ({task}); parameter norms: {norms}")]
    NonFiniteLoss { episode: usize, task: String, norms: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: msg.into() }
    }
}
