use thiserror::Error;

pub type Result<T, E = DgcError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgcError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("vectors do not share a layout")]
    LayoutMismatch,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("selection over an empty scope")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed stream: {0}")]
    MalformedStream(String),
    #[error("invalid sparse update: {0}")]
    InvalidUpdate(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}
