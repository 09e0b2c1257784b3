//! Registration callback target: jobs announce themselves here at startup
//! and learn the port to serve on.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::post;
use axum::Json;
use llmscale_core::registration::{RegistrationError, RegistrationRequest, RegistrationResponse, Registrar};
use llmscale_core::{Clock, StoreError};

use crate::error::ApiError;

pub const REGISTER_PATH: &str = "/internal/endpoints/register";

pub struct EndpointGatewayState {
    pub registrar: Registrar,
    pub clock: Arc<dyn Clock>,
}

pub fn router(state: Arc<EndpointGatewayState>) -> axum::Router {
    axum::Router::new()
        .route(REGISTER_PATH, post(register))
        .with_state(state)
}

fn registration_error(e: RegistrationError) -> ApiError {
    let (status, code) = match &e {
        RegistrationError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
        RegistrationError::UnknownJob(_) => (StatusCode::NOT_FOUND, "unknown_job"),
        RegistrationError::AlreadyRegistered(_) => (StatusCode::CONFLICT, "already_registered"),
        RegistrationError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        RegistrationError::PortRangeExhausted(_) => (StatusCode::SERVICE_UNAVAILABLE, "port_range_exhausted"),
        RegistrationError::Store(StoreError::Conflict(_)) => (StatusCode::SERVICE_UNAVAILABLE, "conflict"),
        RegistrationError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal_error"),
    };
    ApiError::new(status, code, e.to_string())
}

async fn register(
    State(s): State<Arc<EndpointGatewayState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<RegistrationResponse>, ApiError> {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    let request: RegistrationRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))?;
    s.registrar
        .register(&request, auth, s.clock.now())
        .map(Json)
        .map_err(registration_error)
}
