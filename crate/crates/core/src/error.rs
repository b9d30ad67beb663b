use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum BnnpError {
    #[error("matrix not positive definite after jitter {jitter:.1e} ({context})")]
    NotPositiveDefinite { context: String, jitter: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite gradient encountered {consecutive} steps in a row")]
    NonFiniteGradient { consecutive: usize },

    #[error("malformed data at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BnnpError {
    /// True for failures caused by the numbers themselves rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            BnnpError::NotPositiveDefinite { .. } | BnnpError::NonFiniteGradient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, BnnpError>;
