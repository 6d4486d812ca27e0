use std::io;
use std::path::PathBuf;

use dcml_tensor::tns::TnsError;
use dcml_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid patch geometry: {0}")]
    Geometry(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}: {source}")]
    Tns { path: PathBuf, source: TnsError },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A loss or gradient went NaN/Inf; carries where it happened.
    #[error("non-finite {what} during {stage} at step {step}")]
    NonFinite { stage: String, step: usize, what: String },

    #[error("missing prior stage output: {0}")]
    Dependency(String),

    #[error("memory bank is empty; pre-fill it before computing the contrastive loss")]
    BankWarmUp,

    #[error("embedding rejected: {0}")]
    Embedding(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("dataset: {0}")]
    Data(String),
}

impl Error {
    /// Stable machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Io { .. } => "io",
            Error::Tns { .. } => "tensor_file",
            Error::Json(_) => "json",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Dependency(_) => "dependency",
            Error::BankWarmUp => "bank_warm_up",
            Error::Embedding(_) => "embedding",
            Error::Label { .. } => "label",
            Error::Data(_) => "data",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
