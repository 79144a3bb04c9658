use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use userllm_core::encoder::EncoderError;
use userllm_core::gateway::GatewayError;
use userllm_core::orchestrator::TurnError;
use userllm_core::persistence::StoreError;

/// Error response: an HTTP status plus a stable machine-readable code.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    error_code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("unknown session {id}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::warn!(status = %self.status, code = self.code, message = %self.message, "request failed");
        }
        let body = Body { error_code: self.code, message: &self.message };
        (self.status, Json(body)).into_response()
    }
}

fn from_store(e: StoreError) -> ApiError {
    let message = e.to_string();
    match e {
        StoreError::UnknownSession(id) => ApiError::unknown_session(&id),
        StoreError::Log(_) | StoreError::Unavailable { .. } | StoreError::Locked(_) => {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", message)
        }
        _ => ApiError::internal(message),
    }
}

fn from_gateway(e: GatewayError) -> ApiError {
    let message = e.to_string();
    match e {
        GatewayError::ImageTooLarge { .. } | GatewayError::ImageUnreadable { .. } => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", message)
        }
        GatewayError::InvalidRequest(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message),
        _ => ApiError::new(StatusCode::BAD_GATEWAY, "backend_failure", message),
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        let message = e.to_string();
        match e {
            TurnError::UnknownSession(id) => ApiError::unknown_session(&id),
            TurnError::EmptyText => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_text", message),
            TurnError::InvalidGeneration => ApiError::internal(message),
            TurnError::Backend(g) => from_gateway(g),
            TurnError::Trace(_) => ApiError::new(StatusCode::BAD_GATEWAY, "invalid_model_output", message),
            TurnError::Store(s) => from_store(s),
            TurnError::Encoder(EncoderError::Storage(_)) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", message)
            }
            // bad vectors come from the embedding backend
            TurnError::Encoder(_) => ApiError::new(StatusCode::BAD_GATEWAY, "backend_failure", message),
        }
    }
}
