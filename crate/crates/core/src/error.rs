use crate::classifier::ClassifierError;
use crate::docstore::StoreError;
use crate::haar::HaarError;
use crate::image::ImageError;
use crate::neural::NeuralError;
use crate::siamese::SiameseError;
use thiserror::Error;

/// Errors from the enrollment, training, and attendance layers.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("person id {0:?} must match [A-Za-z0-9_-]{{1,64}}")]
    InvalidId(String),
    #[error("person {0} already exists")]
    DuplicateId(String),
    #[error("person {0} not found")]
    PersonNotFound(String),
    #[error("no face found in the frame")]
    NoFace,
    #[error("{0} faces found, enrollment needs exactly one")]
    MultipleFaces(usize),
    #[error("person {0} has already finished enrollment")]
    AlreadyReady(String),
    #[error("{have} samples stored, {need} required")]
    InsufficientSamples { have: u64, need: u64 },
    #[error("training needs at least two ready persons, found {0}")]
    NotEnoughPersons(usize),
    #[error("models not ready: {0}")]
    ModelsNotReady(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {0} is not running")]
    SessionNotRunning(String),
    #[error("frame timestamp {got} is earlier than the previous frame at {last}")]
    NonMonotoneTimestamp { got: String, last: String },
    #[error("a training run is already in progress")]
    TrainingInProgress,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Haar(#[from] HaarError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Siamese(#[from] SiameseError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt stored document: {0}")]
    Json(#[from] serde_json::Error),
}
