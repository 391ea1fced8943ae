use thiserror::Error;

use crate::classical::SolveTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("signal condition violated: ||y|| = {norm_y:e} < tau2 * delta = {bound:e}")]
    SignalCondition { norm_y: f64, bound: f64 },

    /// The discrepancy principle was not met within `max_n` steps.
    #[error("no stop within {max_n} iterations (last residual {last_residual:e}, target {target:e})")]
    Exhausted { max_n: usize, last_residual: f64, target: f64, trace: Box<SolveTrace> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
