//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed a structural or numerical validation rule.
    #[error("validation: {0}")]
    Validation(String),

    /// A delimited input file could not be parsed.
    #[error("schema: {file}:{line}: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },

    /// A symmetric system was singular or indefinite beyond the pivot tolerance.
    #[error("singular system: {0}")]
    Singular(String),

    /// Per-area weight calibration has no feasible solution.
    #[error("calibration failed for area {area}: {message}")]
    Calibration { area: i64, message: String },

    /// The REML optimizer stopped without meeting the gradient tolerance.
    /// Carries the best parameter vector seen (flattened theta) for diagnosis.
    #[error(
        "REML did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best_theta: Vec<f64>,
        best_loglik: f64,
    },

    /// Too many bootstrap or simulation replicates failed to refit.
    #[error("{failed} of {total} replicates failed to refit (cap is {cap_percent}%)")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        cap_percent: f64,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 non-convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Schema { .. }
            | Error::Singular(_)
            | Error::Calibration { .. }
            | Error::Usage(_) => 2,
            Error::NonConvergence { .. } | Error::ReplicateFailures { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}
