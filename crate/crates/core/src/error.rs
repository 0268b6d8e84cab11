use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state space too large: {size} atoms exceeds cap {cap}")]
    StateSpaceTooLarge { size: u128, cap: u64 },

    #[error("kernel over {atoms} atoms is too large for exact construction; use Monte-Carlo kernel estimate instead")]
    KernelTooLarge { atoms: usize },

    #[error("dynamics leaves state space: f({state}, w={noise}) = {output}")]
    DynamicsLeavesStateSpace { state: f64, noise: f64, output: f64 },

    #[error("row {row} is not stochastic (sum = {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
