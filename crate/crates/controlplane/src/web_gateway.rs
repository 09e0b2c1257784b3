//! Client-facing OpenAI-compatible API: authenticate, validate, pick a ready
//! endpoint for the model and relay the upstream response as it arrives.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use llmscale_core::auth::{AuthError, Authenticator};
use llmscale_core::routing::{InferenceKind, InferenceRequest, RouteError, Router};
use llmscale_core::telemetry::ControlPlaneMetrics;
use llmscale_core::{Clock, Endpoint};
use serde_json::json;
use tokio::sync::Notify;

use crate::error::ApiError;

pub struct GatewayState {
    pub authenticator: Authenticator,
    pub router: Router,
    pub clock: Arc<dyn Clock>,
    pub http: reqwest::Client,
    pub metrics: Arc<ControlPlaneMetrics>,
    /// Signalled when an endpoint could not be reached, so the endpoint
    /// worker re-checks health without waiting for its next sweep.
    pub recheck: Arc<Notify>,
}

pub fn router(state: Arc<GatewayState>) -> axum::Router {
    axum::Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/models", get(list_models))
        .route("/v1/chat/completions", post(chat))
        .route("/v1/completions", post(completions))
        .with_state(state)
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string())
}

fn auth_error(e: AuthError) -> ApiError {
    match e {
        AuthError::MissingCredentials => ApiError::new(StatusCode::UNAUTHORIZED, "missing_credentials", e.to_string()),
        AuthError::Unauthorized => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", e.to_string()),
        AuthError::Store(e) => internal(e),
    }
}

fn route_error(e: RouteError) -> ApiError {
    match e {
        RouteError::NoEndpointReady(_) => ApiError::new(StatusCode::FAILED_DEPENDENCY, "no_endpoint_ready", e.to_string()),
        RouteError::UnknownModel(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_model", e.to_string()),
        RouteError::Store(e) => internal(e),
    }
}

fn authenticate(s: &GatewayState, headers: &HeaderMap) -> Result<(), ApiError> {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    s.authenticator.authenticate(auth, s.clock.now()).map(|_| ()).map_err(auth_error)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn list_models(State(s): State<Arc<GatewayState>>, headers: HeaderMap) -> Result<Response, ApiError> {
    authenticate(&s, &headers)?;
    let names = s.router.list_models().map_err(internal)?;
    let data: Vec<_> = names
        .iter()
        .map(|n| json!({"id": n, "object": "model", "created": 0, "owned_by": "llmscale"}))
        .collect();
    Ok(Json(json!({"object": "list", "data": data})).into_response())
}

async fn chat(State(s): State<Arc<GatewayState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    handle(&s, InferenceKind::Chat, &headers, body).await
}

async fn completions(State(s): State<Arc<GatewayState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    handle(&s, InferenceKind::Completion, &headers, body).await
}

async fn handle(s: &GatewayState, kind: InferenceKind, headers: &HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    authenticate(s, headers)?;
    let request = InferenceRequest::parse(kind, &body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))?;
    let first = s.router.select_endpoint(&request.model).map_err(route_error)?;
    let first_err = match forward(s, kind, &first, body.clone()).await {
        Ok(r) => return Ok(r),
        Err(e) => e,
    };
    unreachable_endpoint(s, &first, &first_err);
    let retry = match s.router.select_excluding(&request.model, &[first.id]) {
        Ok(e) => e,
        Err(RouteError::Store(e)) => return Err(internal(e)),
        Err(_) => return Err(bad_gateway(&first_err)),
    };
    match forward(s, kind, &retry, body).await {
        Ok(r) => Ok(r),
        Err(e) => {
            unreachable_endpoint(s, &retry, &e);
            Err(bad_gateway(&e))
        }
    }
}

fn unreachable_endpoint(s: &GatewayState, endpoint: &Endpoint, e: &reqwest::Error) {
    s.metrics.upstream_failures.inc();
    s.recheck.notify_one();
    tracing::warn!(
        endpoint_job_id = %endpoint.endpoint_job_id,
        address = %endpoint.address(),
        error = %e,
        "upstream unreachable"
    );
}

fn bad_gateway(e: &reqwest::Error) -> ApiError {
    ApiError::new(StatusCode::BAD_GATEWAY, "upstream_unreachable", format!("inference server unreachable: {e}"))
}

/// Sends the client's body unchanged, authenticated with the endpoint's own
/// token, and streams the response back with the upstream status.
async fn forward(s: &GatewayState, kind: InferenceKind, endpoint: &Endpoint, body: Bytes) -> Result<Response, reqwest::Error> {
    let url = format!("http://{}{}", endpoint.address(), kind.path());
    let upstream = s
        .http
        .post(url)
        .bearer_auth(&endpoint.bearer_token)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body)
        .send()
        .await?;
    s.metrics.requests_routed.inc();
    let status = StatusCode::from_u16(upstream.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
    let mut headers = HeaderMap::new();
    for name in [header::CONTENT_TYPE, header::CACHE_CONTROL] {
        if let Some(v) = upstream_header(&name, &upstream) {
            headers.insert(name, v);
        }
    }
    let mut response = Response::new(Body::from_stream(upstream.bytes_stream()));
    *response.status_mut() = status;
    *response.headers_mut() = headers;
    Ok(response)
}

fn upstream_header(name: &header::HeaderName, upstream: &reqwest::Response) -> Option<HeaderValue> {
    let v = upstream.headers().get(name.as_str())?;
    HeaderValue::from_bytes(v.as_bytes()).ok()
}
