//! The single error body every endpoint returns.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use presencia_core::docstore::StoreError;
use presencia_core::error::PipelineError;
use presencia_core::haar::HaarError;
use serde::{Deserialize, Serialize};

/// Every machine code an error body can carry, with its HTTP status.
pub const ERROR_CODES: &[(&str, u16)] = &[
    ("INVALID_INPUT", 400),
    ("INVALID_IMAGE", 400),
    ("NOT_FOUND", 404),
    ("PERSON_NOT_FOUND", 404),
    ("SESSION_NOT_FOUND", 404),
    ("JOB_NOT_FOUND", 404),
    ("DUPLICATE_ID", 409),
    ("ALREADY_READY", 409),
    ("INSUFFICIENT_SAMPLES", 409),
    ("NOT_ENOUGH_PERSONS", 409),
    ("MODELS_NOT_READY", 409),
    ("SESSION_NOT_RUNNING", 409),
    ("TRAINING_IN_PROGRESS", 409),
    ("INVALID_ID", 422),
    ("NO_FACE", 422),
    ("MULTIPLE_FACES", 422),
    ("IMAGE_TOO_SMALL", 422),
    ("NON_MONOTONE_TIMESTAMP", 422),
    ("INTERNAL", 500),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub http_status: u16,
}

impl ApiError {
    /// Panics if `code` is not in [`ERROR_CODES`].
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        let status = ERROR_CODES
            .iter()
            .find(|(c, _)| *c == code)
            .map(|&(_, s)| s)
            .unwrap_or_else(|| panic!("undocumented error code {code}"));
        ApiError { code: code.to_string(), message: message.into(), http_status: status }
    }

    pub fn invalid_input(message: impl Into<String>) -> Self {
        ApiError::new("INVALID_INPUT", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new("INTERNAL", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.http_status, self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        let code = match e {
            PipelineError::InvalidId(_) => "INVALID_ID",
            PipelineError::DuplicateId(_) => "DUPLICATE_ID",
            PipelineError::PersonNotFound(_) => "PERSON_NOT_FOUND",
            PipelineError::NoFace => "NO_FACE",
            PipelineError::MultipleFaces(_) => "MULTIPLE_FACES",
            PipelineError::AlreadyReady(_) => "ALREADY_READY",
            PipelineError::InsufficientSamples { .. } => "INSUFFICIENT_SAMPLES",
            PipelineError::NotEnoughPersons(_) => "NOT_ENOUGH_PERSONS",
            PipelineError::ModelsNotReady(_) => "MODELS_NOT_READY",
            PipelineError::SessionNotFound(_) => "SESSION_NOT_FOUND",
            PipelineError::SessionNotRunning(_) => "SESSION_NOT_RUNNING",
            PipelineError::NonMonotoneTimestamp { .. } => "NON_MONOTONE_TIMESTAMP",
            PipelineError::TrainingInProgress => "TRAINING_IN_PROGRESS",
            PipelineError::InvalidInput(_) => "INVALID_INPUT",
            PipelineError::Image(_) | PipelineError::Haar(HaarError::Image(_)) => "INVALID_IMAGE",
            PipelineError::Haar(HaarError::ImageTooSmall { .. }) => "IMAGE_TOO_SMALL",
            PipelineError::Store(StoreError::SchemaViolation { .. }) => "INVALID_INPUT",
            _ => "INTERNAL",
        };
        ApiError::new(code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
