//! Error types shared by the estimators.

use thiserror::Error;

/// Errors raised by model construction, data handling, and the estimators.
#[derive(Debug, Error)]
pub enum OpeError {
    /// Inputs have inconsistent shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input value or structure is invalid.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The target policy puts mass where the behavior policy has none, so
    /// importance ratios are undefined at the listed (state, action) pairs.
    #[error("behavior policy has zero probability at (state, action) pairs {pairs:?} where the target policy is positive")]
    SupportViolation { pairs: Vec<(usize, usize)> },

    /// States that never appear as the source of a logged transition.
    #[error("no logged transitions at states {states:?}; collect more data or run with missing-state=bound")]
    UncoveredStates { states: Vec<usize> },

    /// A plug-in linear system failed its invertibility precondition.
    #[error("plug-in system not solvable: {0}")]
    SingularSystem(String),

    /// Value iteration exceeded its sweep cap. Carries the per-state
    /// contraction margins observed on the final diagnostics pass.
    #[error("value iteration did not converge within {cap} sweeps (residual {residual:.3e}); contraction margins per state: {margins:?}")]
    NoConvergence {
        cap: usize,
        residual: f64,
        margins: Vec<f64>,
    },

    /// File I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A record in a line-oriented file could not be parsed.
    #[error("{path}:{line}: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },

    /// An internal invariant failed; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl OpeError {
    /// True when the error reflects bad inputs or data rather than an
    /// estimator failure. Used by callers to pick exit codes.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            OpeError::DimensionMismatch(_)
                | OpeError::InvalidInput(_)
                | OpeError::SupportViolation { .. }
                | OpeError::UncoveredStates { .. }
                | OpeError::Io { .. }
                | OpeError::MalformedRecord { .. }
        )
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, OpeError>;
