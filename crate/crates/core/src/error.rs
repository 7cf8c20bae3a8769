use thiserror::Error;

/// Errors surfaced by the estimation library.
///
/// Solver non-convergence is not an error: solvers return their best iterate
/// with a diagnostics flag instead.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("partial frequency {omega:.6} rad/sample at or above Nyquist (pi) after {attempts} draws")]
    Aliasing { omega: f64, attempts: usize },

    #[error("signal is identically zero; cannot normalize")]
    ZeroSignal,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed data: {0}")]
    MalformedData(String),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
