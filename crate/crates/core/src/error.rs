//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all laboratory operations.
#[derive(Debug, Error)]
pub enum QrError {
    /// I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Tabular input could not be parsed; names the offending location.
    #[error("parse error in {path} at data row {row}, column '{column}': {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    /// A required column is absent from the input header.
    #[error("missing column '{column}' in {path}")]
    MissingColumn { path: String, column: String },

    /// Precondition violation (argument out of domain, malformed spec, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A matrix that must be invertible is singular (or numerically so).
    #[error("singular matrix: {0}")]
    Singular(String),

    /// The design matrix does not have full column rank.
    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    /// A combinatorial or enumeration budget was exceeded.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// The iterative solver failed (cycling guard); carries a pivot trace.
    #[error("solver failure: {message}; recent pivots: {trace:?}")]
    SolverFailure { message: String, trace: Vec<String> },

    /// A persisted report's schema version does not match this build.
    #[error("schema version mismatch: found '{found}', expected '{expected}'")]
    SchemaMismatch { found: String, expected: String },

    /// A non-finite value was about to be serialized; names the field.
    #[error("non-finite value in field '{field}'")]
    NonFinite { field: String },

    /// Too many per-replication failures invalidated a study.
    #[error("study aborted: {failures} of {total} replications failed (budget {budget_percent}%)")]
    StudyAborted {
        failures: usize,
        total: usize,
        budget_percent: f64,
    },

    /// Configuration file problem.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, QrError>;

impl QrError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        QrError::Invalid(msg.into())
    }
}
