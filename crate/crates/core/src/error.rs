use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension { what: String, expected: String, found: String },

    #[error("{what} is not symmetric (defect {defect:e})")]
    NotSymmetric { what: String, defect: f64 },

    #[error("matrix is indefinite (minimum eigenvalue {lambda_min:e})")]
    Indefinite { lambda_min: f64 },

    #[error("invalid model:\n{0}")]
    InvalidModel(ValidationReport),

    #[error("Riccati recursion is not solvable: first failure at k={k}, mode {mode}: {reason}")]
    Unsolvable { k: usize, mode: usize, reason: String },

    #[error("iteration diverged after {iterations} iterations (last increment norms {tail:?})")]
    Diverged {
        iterations: usize,
        /// Max-norm of every iterate, in order.
        norms: Vec<f64>,
        tail: Vec<f64>,
    },

    #[error("power iteration did not converge (last two estimates {previous:e}, {last:e})")]
    NoConvergence { previous: f64, last: f64 },

    #[error("internal consistency check failed: {what} (residual {residual:e})")]
    Inconsistent { what: String, residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension { what: what.into(), expected: expected.to_string(), found: found.to_string() }
    }
}
