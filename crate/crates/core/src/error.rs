use thiserror::Error;

/// Errors raised by the models, rules and the protocol engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inconsistent sizes, invalid probabilities or out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// The model is too large for exact enumeration; use sampling paths instead.
    #[error("capacity exceeded: {what} = {size} is above the limit {limit}")]
    Capacity { what: &'static str, size: u128, limit: u128 },

    #[error("induced chain is not irreducible: state {0} is unreachable or cannot return")]
    NotIrreducible(usize),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e}); chain is likely periodic")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },

    #[error("non-finite parameter for agent {agent} at round {round}")]
    NonFinite { agent: usize, round: usize },

    #[error("schema error: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
