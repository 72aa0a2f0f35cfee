use thiserror::Error;

/// Which part of the grouping assumption a noise model failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// The matrix of bag proportions is singular or too badly conditioned to invert.
    Singular,
    /// The clean prior is not in the interior of the convex hull of the bag proportions.
    PriorOutsideHull,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Singular => f.write_str("singular proportion matrix"),
            Violation::PriorOutsideHull => f.write_str("prior outside the hull of bag proportions"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },

    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),

    #[error("not column-stochastic: {0}")]
    NotColumnStochastic(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular matrix (condition estimate {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("assumption violated in group {group}: {kind}")]
    AssumptionViolation { group: usize, kind: Violation },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("class {class} exhausted with {overflow} draws left to place")]
    ClassExhausted { class: usize, overflow: usize },

    #[error("bookkeeping mismatch: {0}")]
    Bookkeeping(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
