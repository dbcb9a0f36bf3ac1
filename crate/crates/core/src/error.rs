use thiserror::Error;

/// Errors raised by the solvers, the assimilation layer and the experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid grid function: {0}")]
    InvalidGrid(String),

    #[error("invalid time mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("observation time {time} is not a node of the time mesh")]
    ObservationOffMesh { time: f64 },

    #[error("invalid observation set: {0}")]
    InvalidObservations(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("solution blew up at t = {time}: sup-norm {sup_norm:.3e} exceeds ceiling {ceiling:.3e}")]
    BlowUp { time: f64, sup_norm: f64, ceiling: f64 },

    #[error("non-finite state encountered at t = {time}")]
    NonFinite { time: f64 },

    #[error("comparison ODE blew up at t = {time} (growth condition violated?)")]
    OdeBlowUp { time: f64 },

    #[error("line search failed after {attempts} backtracking steps at iteration {iteration}")]
    LineSearchFailed { iteration: usize, attempts: usize },

    #[error("non-finite cost encountered at iteration {iteration}")]
    NonFiniteCost { iteration: usize },

    #[error("requested {requested} modes but the grid resolves at most {max}")]
    TooManyModes { requested: usize, max: usize },

    #[error("hypotheses violated: {0}")]
    Hypotheses(String),

    #[error("non-finite constant in certificate: {0}")]
    NonFiniteConstant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for configuration problems (CLI exit status 2), false for runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
