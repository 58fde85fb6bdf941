use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use domainsat_core::Error as CoreError;
use serde_json::{json, Value};

/// An HTTP error rendered as `{"error": {"code", "message", "detail"}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
            detail: json!({}),
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("{what} '{id}' not found")).with_detail(json!({ "id": id }))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, "kind_mismatch", message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Maps a core error raised while parsing uploaded data (400) or while
    /// validating a request (422).
    pub fn from_core(e: &CoreError) -> Self {
        let status = match e {
            CoreError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            CoreError::Schema(_) | CoreError::Value { .. } | CoreError::Parse { .. } | CoreError::Range { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let detail = match e {
            CoreError::Parse { line, column, value, .. } => json!({ "line": line, "column": column, "value": value }),
            CoreError::Range { line, column, value } => json!({ "line": line, "column": column, "value": value }),
            CoreError::Value { row, column, .. } => json!({ "row": row, "column": column }),
            _ => json!({}),
        };
        ApiError::new(status, e.code(), e.to_string()).with_detail(detail)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        ApiError::from_core(&e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "detail": self.detail }
        });
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
