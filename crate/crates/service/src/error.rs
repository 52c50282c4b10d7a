use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use brachy_core::archive::ArchiveError;
use brachy_core::dosimetry::DoseError;
use brachy_core::planning::PlanError;
use brachy_core::registration::RegistrationError;
use brachy_core::segmentation::SegmentationError;
use brachy_core::volume::VolumeError;
use serde::Serialize;
use thiserror::Error;

use crate::workflow::WorkflowStage;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("case `{0}` not found")]
    NotFound(String),
    #[error("case `{0}` already exists")]
    Conflict(String),
    #[error("{action} not allowed in stage {stage}")]
    State { stage: WorkflowStage, action: String },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Dose(#[from] DoseError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn state(stage: WorkflowStage, action: impl Into<String>) -> Self {
        ServiceError::State { stage, action: action.into() }
    }

    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::State { .. } => "state_error",
            ServiceError::Validation(_)
            | ServiceError::Volume(_)
            | ServiceError::Plan(_)
            | ServiceError::Dose(_)
            | ServiceError::Registration(_)
            | ServiceError::Segmentation(_) => "validation_error",
            ServiceError::Archive(ArchiveError::InvalidCaseId(_)) => "validation_error",
            ServiceError::Archive(ArchiveError::Corrupt { .. }) => "corrupt_artifact",
            ServiceError::Archive(_) | ServiceError::Internal(_) => "internal_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "state_error" => StatusCode::CONFLICT,
            "validation_error" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
