use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("zero extent")]
    ZeroExtent,
    #[error("mesh too small to walk")]
    MeshTooSmall,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
