//! OpenAI-style error responses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use verde_core::Error;

use crate::router::UpstreamError;
use crate::wire::{ErrorBody, ErrorDetail};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, code, message: message.into() }
    }

    /// The single response for every authentication failure.
    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "invalid_request_error", "invalid_api_key", "Invalid API key")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "permission_error", "forbidden", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request_error", "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "invalid_request_error", "not_found", message)
    }

    pub fn model_not_found(model: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "invalid_request_error",
            "model_not_found",
            format!("The model `{model}` does not exist"),
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "server_error", "internal_error", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail { message: self.message.clone(), kind: self.kind.to_string(), code: self.code.to_string() },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Auth => Self::unauthorized(),
            Error::Validation(m) | Error::UnsupportedFormat(m) | Error::Encoding(m) => Self::bad_request(m),
            Error::DimensionMismatch { .. } => Self::bad_request(e.to_string()),
            Error::NotFound(m) => Self::not_found(format!("{m} not found")),
            Error::Conflict(m) => Self::new(StatusCode::CONFLICT, "invalid_request_error", "conflict", m),
            Error::VersionConflict { .. } => {
                Self::new(StatusCode::CONFLICT, "invalid_request_error", "conflict", "concurrent update, retry")
            }
            Error::InsufficientBudget { .. } => Self::new(
                StatusCode::PAYMENT_REQUIRED,
                "insufficient_quota",
                "insufficient_budget",
                e.to_string(),
            ),
            Error::Corrupt(_) | Error::Io(_) | Error::Json(_) => {
                tracing::error!(error = %e, "internal failure");
                Self::internal("internal error")
            }
        }
    }
}

impl From<UpstreamError> for ApiError {
    fn from(e: UpstreamError) -> Self {
        match e {
            UpstreamError::Timeout => {
                Self::new(StatusCode::GATEWAY_TIMEOUT, "upstream_error", "upstream_timeout", e.to_string())
            }
            _ => Self::new(StatusCode::BAD_GATEWAY, "upstream_error", "upstream_error", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}
