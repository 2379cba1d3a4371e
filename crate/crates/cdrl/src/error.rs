//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdrlError {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty domain side: {0}")]
    EmptyDomain(String),
    #[error("no style model available: {0}")]
    MissingModel(String),
    #[error("training stream requires pseudo pairs, got provenance {0}")]
    Provenance(String),
    #[error("training diverged (non-finite loss) at step {step}; last finite checkpoint: {last_checkpoint:?}")]
    TrainingDiverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("score list contains a single class; AUC undefined")]
    DegenerateLabels,
    #[error("cannot pack requested change area: {0}")]
    Packing(String),
    #[error("output already exists: {0} (pass force to overwrite)")]
    Collision(PathBuf),
    #[error("missing upstream artifact: {what} (produce it with `{producer}`)")]
    MissingUpstream { what: String, producer: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CdrlError>;

impl CdrlError {
    /// Exit-code class for the CLI: 1 = validation/configuration error,
    /// 2 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CdrlError::NotFound(_)
            | CdrlError::Format(_)
            | CdrlError::Layout(_)
            | CdrlError::Size(_)
            | CdrlError::Shape(_)
            | CdrlError::Param(_)
            | CdrlError::EmptyDataset
            | CdrlError::EmptyDomain(_)
            | CdrlError::MissingModel(_)
            | CdrlError::Provenance(_)
            | CdrlError::DegenerateLabels
            | CdrlError::Packing(_)
            | CdrlError::Collision(_)
            | CdrlError::MissingUpstream { .. } => 1,
            CdrlError::TrainingDiverged { .. }
            | CdrlError::Io(_)
            | CdrlError::Image(_)
            | CdrlError::Json(_) => 2,
        }
    }
}
