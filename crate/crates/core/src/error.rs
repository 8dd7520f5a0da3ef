use thiserror::Error;

use sparsepo_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("train: {0}")]
    Train(String),

    #[error("analysis: {0}")]
    Analysis(String),
}

impl Error {
    /// Short machine-readable category used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Model(_) => "model",
            Error::Mask(_) => "mask",
            Error::Loss(_) => "loss",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Train(_) => "train",
            Error::Analysis(_) => "analysis",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
