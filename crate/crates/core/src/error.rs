use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("row {row} sums to {sum}, not 1")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid size N must be at least 1")]
    InvalidN,

    #[error("output resolution T must be at least 1")]
    InvalidT,

    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),

    #[error("value {0} lies outside [0, 1]")]
    OutOfRange(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid loss function: {0}")]
    InvalidLoss(String),

    #[error("loss function has an empty guess set")]
    EmptyGuessSet,

    #[error("quadrature did not converge: achieved error {achieved:e} > target {target:e}")]
    QuadratureNonconvergence { achieved: f64, target: f64 },

    #[error("mechanism evaluation failed: {0}")]
    EvaluationFailure(String),

    #[error("posteriors are linearly dependent (smallest relative singular value {0:e})")]
    LinearDependence(f64),

    #[error("invalid refinement witness: {0}")]
    InvalidWitness(String),

    #[error("LP solver failure: {0}")]
    SolverFailure(String),

    #[error("DP sampler stalled after {0} iterations")]
    SamplerStall(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
