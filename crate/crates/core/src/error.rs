use hpn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("range: {0}")]
    Range(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: geometry: {reason}")]
    Geometry { line: usize, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("unsupported for variant {variant}: {what}")]
    Unsupported { variant: String, what: String },
    #[error("training diverged in stage {stage} at epoch {epoch}")]
    Divergence { stage: String, epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
