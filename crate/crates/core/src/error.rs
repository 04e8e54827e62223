use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("step {step} out of range 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sample too small: {given} values, need at least {needed}")]
    SampleTooSmall { given: usize, needed: usize },

    #[error("sample has zero variance")]
    ZeroVariance,

    #[error("non-finite values at step {step}: {stats}")]
    NonFinite { step: usize, stats: String },

    #[error("denoiser failure: {0}")]
    Denoiser(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
