use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TicError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dense representation needs d = {dim} but the cap is {cap}")]
    CapExceeded { dim: usize, cap: usize },

    #[error("Cholesky factorization failed at pivot {index} (pivot value {pivot:e}); increase damping")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("Cholesky factorization of block {block} failed at pivot {index} (pivot value {pivot:e})")]
    BlockNotPositiveDefinite {
        block: usize,
        index: usize,
        pivot: f64,
    },

    #[error("assembled matrix is not positive semi-definite within tolerance {tolerance:e}")]
    NotPsd { tolerance: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("all {0} trials diverged")]
    AllDiverged(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TicError {
    fn from(err: std::io::Error) -> Self {
        TicError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TicError>;
