use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum NxnError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("rejected configuration: {0}")]
    RejectedConfig(String),

    #[error("unsupported tableau: {0}")]
    UnsupportedTableau(String),

    #[error("numerical singularity: {0}")]
    Singular(String),

    #[error("divergence detected at {context}: non-finite value")]
    Divergence { context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NxnError>;

impl NxnError {
    pub fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        NxnError::DimensionMismatch {
            expected,
            got,
            context,
        }
    }
}
