use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("design certificate failed: worst ratio {worst_ratio:.6} exceeds bound {bound}")]
    Certificate { worst_ratio: f64, bound: f64 },
    #[error("refusing to enumerate {count:.3e} deterministic policies (cap {cap:.0e})")]
    TooManyPolicies { count: f64, cap: f64 },
    #[error("n = {got} is below the required sample size {required}")]
    InsufficientSamples { got: usize, required: usize },
    #[error("every candidate was rejected by the width filter; worst widths {worst_widths:?} vs threshold {threshold}")]
    EmptyFilter {
        worst_widths: Vec<f64>,
        threshold: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
