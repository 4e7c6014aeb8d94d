//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by grid construction, resampling, kernels and the model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no valid pixels in mask")]
    EmptyMask,

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for failures of numeric nature (as opposed to bad inputs/files).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::EmptyMask)
    }
}
