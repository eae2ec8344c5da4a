use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use poiloc_core::geodesy::GeodesyError;
use poiloc_core::poi_store::StoreError;
use poiloc_core::projection::ProjectionError;
use poiloc_core::telemetry::TelemetryError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    RayMissesGround,
    BehindCamera,
    NotFound,
    StorageFailure,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::RayMissesGround | ErrorCode::BehindCamera => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::StorageFailure => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// JSON error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", serde_json::to_value(self.code).unwrap_or_default().as_str().unwrap_or("error"), self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::to_vec(&self).expect("error body serializes");
        (
            self.code.status(),
            [(axum::http::header::CONTENT_TYPE, "application/json")],
            body,
        )
            .into_response()
    }
}

impl From<ProjectionError> for ApiError {
    fn from(e: ProjectionError) -> Self {
        let code = match e {
            ProjectionError::RayMissesGround | ProjectionError::CameraBelowGround(_) => ErrorCode::RayMissesGround,
            ProjectionError::BehindCamera => ErrorCode::BehindCamera,
            ProjectionError::InvalidIntrinsics(_) | ProjectionError::InvalidQuaternion(_) | ProjectionError::Geodesy(_) => {
                ErrorCode::BadRequest
            }
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::StorageFailure(_) | StoreError::CorruptStore { .. } => ErrorCode::StorageFailure,
            StoreError::UnknownTarget(_) | StoreError::NotFound(_) => ErrorCode::NotFound,
            StoreError::InvalidInput(_) => ErrorCode::BadRequest,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<GeodesyError> for ApiError {
    fn from(e: GeodesyError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl From<TelemetryError> for ApiError {
    fn from(e: TelemetryError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::bad_request(format!("malformed body: {e}"))
    }
}
