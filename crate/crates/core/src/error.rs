use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("datum index {index} out of range 0..={n_data}")]
    IndexOutOfRange { index: usize, n_data: usize },

    #[error("operation requires a {expected} model")]
    WrongModelKind { expected: &'static str },

    #[error("estimator mismatch: {0}")]
    EstimatorMismatch(&'static str),

    #[error("mode search did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iters: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("{kind} chain diverged at iteration {iteration} (gamma = {gamma:e})")]
    Divergence {
        kind: String,
        gamma: f64,
        iteration: usize,
    },

    #[error("operator {name} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    OperatorNotPositive { name: String, min_eigenvalue: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("step size out of range: {0}")]
    StepSizeOutOfRange(String),

    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
