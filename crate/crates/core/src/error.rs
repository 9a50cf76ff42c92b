use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("negative value {value} at index {index}")]
    NegativeValue { index: usize, value: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("empty transport problem")]
    EmptyProblem,
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("infinite energy")]
    InfiniteEnergy,
    #[error("oracle blow-up: max density {max} exceeded guard {guard}")]
    BlowUp { max: f64, guard: f64 },
    #[error("expression error at offset {offset}: {message}")]
    Expr { offset: usize, message: String },
    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
