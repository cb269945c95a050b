use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state index {index} out of range ({n_states} states)")]
    StateOutOfRange { index: usize, n_states: usize },

    #[error("action index {index} out of range ({n_actions} actions)")]
    ActionOutOfRange { index: usize, n_actions: usize },

    #[error("step index {index} out of range (trajectory length {len})")]
    StepOutOfRange { index: usize, len: usize },

    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("empty trajectory batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
