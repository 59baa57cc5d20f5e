use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("argument {index} of vector field: {reason}")]
    Argument { index: usize, reason: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite state in interval {interval}, substep {substep}")]
    NonFiniteState { interval: usize, substep: usize },

    #[error("non-finite function value at perturbed coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("time {time} is not on the solver grid (step {step})")]
    OffGrid { time: f64, step: f64 },

    #[error("observation at t={time} out of order: adjoint cursor is at t={cursor}")]
    ObservationOrder { time: f64, cursor: f64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("population trajectory overflowed at t={time}")]
    Overflow { time: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
