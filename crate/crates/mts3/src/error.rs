use thiserror::Error;

/// Errors surfaced by inference kernels, data handling and training.
#[derive(Debug, Error)]
pub enum MtsError {
    #[error("covariance slice not positive definite: determinant term {det:e} at index {index}")]
    NotPositiveDefinite { det: f64, index: usize },

    #[error("non-positive variance {value:e} at index {index}")]
    NonPositiveVariance { value: f64, index: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        step: usize,
    },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MtsError>;
