//! API errors and their JSON rendering: `{"error": <code>, "message": ...}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use stutter_core::pipeline::PipelineError;
use stutter_core::store::{SessionState, StoreError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("reading sessions need non-empty reading_text")]
    MissingReadingText,
    #[error("{0}")]
    BadRequest(String),
    #[error("session is {state}; {action} is not allowed")]
    InvalidState {
        state: SessionState,
        action: &'static str,
    },
    #[error("analysis job {job_id} is already running for this session")]
    JobActive { job_id: String },
    #[error("malformed audio: {0}")]
    MalformedAudio(String),
    #[error("{speech_s:.2} s of speech detected, need {required_s:.2} s")]
    TooLittleSpeech { speech_s: f64, required_s: f64 },
    #[error("enrollments do not separate the speakers ({0}); re-enroll")]
    NotSeparable(String),
    #[error("analysis not ready")]
    NotReady { progress: f64 },
    #[error("analysis failed: {0}")]
    AnalysisFailed(String),
    #[error("span of {span_s} s is not below the 10 s spectrogram limit")]
    SpanTooLong { span_s: f64 },
    #[error("range [{from_s}, {to_s}] is outside [0, {duration_s}] or empty")]
    RangeOutOfBounds {
        from_s: f64,
        to_s: f64,
        duration_s: f64,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("storage is full")]
    StorageFull,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "NotFound",
            ApiError::MissingReadingText => "MissingReadingText",
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::InvalidState { .. } | ApiError::JobActive { .. } => "InvalidState",
            ApiError::MalformedAudio(_) => "MalformedAudio",
            ApiError::TooLittleSpeech { .. } => "TooLittleSpeech",
            ApiError::NotSeparable(_) => "NotSeparableWell",
            ApiError::NotReady { .. } => "NotReady",
            ApiError::AnalysisFailed(_) => "AnalysisFailed",
            ApiError::SpanTooLong { .. } => "SpanTooLong",
            ApiError::RangeOutOfBounds { .. } => "RangeOutOfBounds",
            ApiError::Conflict(_) => "Conflict",
            ApiError::StorageFull => "StorageFull",
            ApiError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::InvalidState { .. }
            | ApiError::JobActive { .. }
            | ApiError::NotReady { .. }
            | ApiError::AnalysisFailed(_)
            | ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::MissingReadingText
            | ApiError::MalformedAudio(_)
            | ApiError::TooLittleSpeech { .. }
            | ApiError::NotSeparable(_)
            | ApiError::SpanTooLong { .. }
            | ApiError::RangeOutOfBounds { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::StorageFull => StatusCode::INSUFFICIENT_STORAGE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(err: StoreError) -> Self {
        match err {
            StoreError::NotFound(id) => ApiError::NotFound(format!("session {id}")),
            StoreError::WriteConflict(_) => ApiError::Conflict(err.to_string()),
            StoreError::StorageFull => ApiError::StorageFull,
            StoreError::InvalidSession(_) => ApiError::BadRequest(err.to_string()),
            StoreError::InvalidTransition { from, .. } => ApiError::InvalidState {
                state: from,
                action: "this change",
            },
            StoreError::CorruptArtifact { .. } | StoreError::Io(_) => {
                ApiError::Internal(err.to_string())
            }
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(err: PipelineError) -> Self {
        match err {
            PipelineError::Audio(e) => ApiError::MalformedAudio(e.to_string()),
            PipelineError::TooLittleSpeech {
                speech_s,
                required_s,
            } => ApiError::TooLittleSpeech {
                speech_s,
                required_s,
            },
            PipelineError::Phones(e) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        match &self {
            ApiError::NotReady { progress } => body["progress"] = json!(progress),
            ApiError::JobActive { job_id } => body["job_id"] = json!(job_id),
            _ => {}
        }
        if let ApiError::Internal(message) = &self {
            tracing::error!(%message, "request failed");
        }
        (self.status(), Json(body)).into_response()
    }
}
