use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] lap_numgrad::Error),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model configuration: {0}")]
    Model(String),
    #[error("degenerate trace: {0}")]
    Degenerate(String),
    #[error("trace rejected: {0}")]
    Rejected(String),
    #[error("qp solver did not converge after {iters} iterations (stationarity {stationarity:.3e}, feasibility {feasibility:.3e}, complementarity {complementarity:.3e})")]
    Solver {
        iters: usize,
        stationarity: f64,
        feasibility: f64,
        complementarity: f64,
    },
    #[error("training: {0}")]
    Training(String),
    #[error("planning: {0}")]
    Planning(String),
    #[error("simulation blew up at t = {time:.4} s")]
    BlowUp { time: f64 },
    #[error("validation: {0}")]
    Validation(String),
    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
