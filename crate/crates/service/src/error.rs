use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use clicktrack_core::geometry::{ImageSize, Point};
use clicktrack_core::Error;
use serde::{Deserialize, Serialize};

use crate::session::SessionState;

/// Error payload: `{code, message}` with a matching HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn malformed_upload(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_upload", message)
    }

    pub fn out_of_bounds(p: Point, size: ImageSize) -> Self {
        Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "out_of_bounds",
            format!("point ({}, {}) outside the {}x{} frame", p.x, p.y, size.width, size.height),
        )
    }

    pub fn invalid_state(op: &str, state: SessionState) -> Self {
        let state = serde_json::to_value(state).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        Self::new(StatusCode::CONFLICT, "invalid_state", format!("{op} not allowed in state {state}"))
    }

    pub fn frame_not_reached(frame: usize, tracked: usize) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "frame_not_reached",
            format!("frame {frame} is past the {tracked} tracked frames"),
        )
    }

    pub fn tracker_init(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "tracker_init", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Vocabulary(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_category", msg),
            Error::PointOutside { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", msg),
            Error::RefinementFailure(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "refinement_failed", msg),
            Error::TrackerInit(_) => Self::tracker_init(msg),
            Error::Input(_) | Error::InvalidGeometry(_) => Self::bad_request(msg),
            _ => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
