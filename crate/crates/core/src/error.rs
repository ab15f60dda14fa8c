use std::path::PathBuf;

use thiserror::Error;

use crate::agents::TrainingHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    NonFinite { layer: usize, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("split `{split}` would contain no patients ({n_patients} patients in total)")]
    UnderpopulatedSplit { split: &'static str, n_patients: usize },

    #[error("every feature exceeds the removal threshold; dataset is unusable")]
    UnusableDataset,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at step {step} (loss {loss:e})")]
    Divergence {
        step: usize,
        loss: f64,
        history: Box<TrainingHistory>,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("calibration split is empty")]
    EmptyCalibration,

    #[error("malformed file {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse(_) | Error::Config(_) => 2,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::EmptyCalibration => 5,
            Error::MissingArtifact(_) => 6,
            _ => 1,
        }
    }
}
