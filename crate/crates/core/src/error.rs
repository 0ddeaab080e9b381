use thiserror::Error;

#[derive(Debug, Error)]
pub enum FateError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("unknown variant `{0}` (expected one of full, ts, fnd, tmp, int)")]
    UnknownVariant(String),
    #[error("checkpoint incompatible with model:\n  {}", .0.join("\n  "))]
    Incompatible(Vec<String>),
    #[error(
        "training diverged at epoch {epoch}, batch {batch}: loss {loss}; parameter norm {param_norm:.4e}, gradient norm {grad_norm:.4e}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        param_norm: f64,
        grad_norm: f64,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FateError>;
