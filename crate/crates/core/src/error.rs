//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes do not line up (wrong number of states/actions/entries).
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A vector that must be a probability distribution is not one.
    #[error("{what} is not a probability distribution (sum = {sum:.17e})")]
    InvalidDistribution { what: String, sum: f64 },

    /// A scalar parameter is outside its admissible range.
    #[error("invalid {what}: {details}")]
    InvalidParameter { what: &'static str, details: String },

    /// A linear solve failed (singular or numerically broken system).
    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    /// An iterative method hit its iteration cap before converging.
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    /// Candidate features do not span the requested dimension.
    #[error("feature matrix is rank deficient: rank {rank} < dim {dim}")]
    RankDeficient { rank: usize, dim: usize },

    /// The optimal-design invariants could not be certified.
    #[error("design verification failed: {0}")]
    DesignVerification(String),

    /// A greedy action set came back empty for some state.
    #[error("empty greedy set for state {state}")]
    EmptyGreedySet { state: usize },

    /// I/O or serialization problem in the interchange formats.
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
