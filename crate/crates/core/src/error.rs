use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the pipeline, from volume ingestion to training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing modality file for case {case}: {file}")]
    MissingModality { case: String, file: String },

    #[error("inconsistent shapes across modalities for case {case}: {details}")]
    ShapeInconsistency { case: String, details: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite loss in term '{term}' at step {step}")]
    NonFiniteLoss { term: String, step: usize },

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid file {path}: {details}")]
    InvalidFile { path: PathBuf, details: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a fold index to an error propagated out of cross-validation.
    pub fn in_fold(self, fold: usize) -> Error {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}
