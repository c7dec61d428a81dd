use thiserror::Error;

/// Errors produced across the reserve-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape: diagonal entry {index} is {value:e}, below floor {floor:e}")]
    DegenerateShape { index: usize, value: f64, floor: f64 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("support direction vanishes: ||L^T w|| = {0:e}")]
    ZeroDirection(f64),

    #[error("gauge gradient undefined at the zero realization")]
    ZeroRealization,

    #[error("matrix is not positive semidefinite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid linear program: {0}")]
    InvalidProblem(String),

    #[error("simplex stalled after {0} iterations")]
    SolverStall(usize),

    #[error("solution is not optimal (status {0})")]
    NotOptimal(String),

    #[error("base decoupled dispatch is infeasible")]
    BaseInfeasible,

    #[error("invalid generator parameters: {0}")]
    BadParams(String),

    #[error("invalid system: {0}")]
    BadSystem(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all kernel weights underflow (bandwidth too small for the score spread)")]
    DegenerateWeights,

    #[error("calibration set too small: need index {k} but only {n_cal} scores")]
    InsufficientCalibration { k: usize, n_cal: usize },

    #[error("robust dispatch infeasible at iteration {iteration} (radius {rho})")]
    InfeasibleAtShape { iteration: usize, rho: f64 },

    #[error("series too short: {len} < {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
