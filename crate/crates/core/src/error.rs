//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A destination desires a message it already has cached.
    #[error("destination {destination}: desired and cached sets overlap (message {message})")]
    Overlap { destination: usize, message: usize },

    /// A message index outside 1..=K.
    #[error("destination {destination}: message index {index} out of range 1..={k}")]
    IndexOutOfRange {
        destination: usize,
        index: usize,
        k: usize,
    },

    /// A destination with nothing to deliver.
    #[error("destination {destination}: desired set is empty")]
    EmptyDesired { destination: usize },

    /// Stream counts must be at least one per message.
    #[error("message {message}: stream count must be >= 1")]
    BadStreamCount { message: usize },

    /// A parameter outside its valid range.
    #[error("{0}")]
    Range(String),

    /// Malformed instance or design document.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    DimensionMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    /// Sigma factor too ill-conditioned for the exact Hessian.
    #[error("sigma factor is numerically singular (cond = {cond:.3e})")]
    SingularSigma { cond: f64 },

    /// A truncation target below the numerical rank of the update.
    #[error("rank collapse: singular value {index} of the update is below 1e-14")]
    RankCollapse { index: usize },

    /// Search direction vanishes on the observed set.
    #[error("line-search direction vanishes on the observed entries")]
    ZeroDirection,

    /// No useful rank-increase direction at the current point.
    #[error("rank-increase stagnation: no escape direction")]
    Stagnation,

    /// A completion handed to the delivery layer that does not meet the
    /// feasibility target.
    #[error("infeasible completion: cost {cost:.3e} exceeds epsilon {epsilon:.3e}")]
    Infeasible { cost: f64, epsilon: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}
