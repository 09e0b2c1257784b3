//! Observability and autoscaling surface: Prometheus HTTP service discovery,
//! the scale webhook, the control plane's own counters and a read-only view
//! of the evaluator's series.

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Json;
use llmscale_core::scaling::{discovery_targets, MetricSeries, ScaleCommand, ScaleController, ScaleError, ScaleOutcome, TargetGroup};
use llmscale_core::telemetry::ControlPlaneMetrics;
use llmscale_core::StateStore;

use crate::error::ApiError;

pub const EXPOSITION_CONTENT_TYPE: &str = "text/plain; version=0.0.4; charset=utf-8";

pub struct MetricsGatewayState {
    pub store: Arc<dyn StateStore>,
    pub controller: Arc<ScaleController>,
    pub metrics: Arc<ControlPlaneMetrics>,
    /// Latest copy of the evaluator's series, published after every tick.
    pub series: Arc<RwLock<Vec<MetricSeries>>>,
}

pub fn router(state: Arc<MetricsGatewayState>) -> axum::Router {
    axum::Router::new()
        .route("/sd/targets", get(targets))
        .route("/internal/scale", post(scale))
        .route("/metrics", get(metrics))
        .route("/debug/series", get(series))
        .with_state(state)
}

fn scale_error(e: ScaleError) -> ApiError {
    let (status, code) = match &e {
        ScaleError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
        ScaleError::UnknownModel(_) => (StatusCode::NOT_FOUND, "unknown_model"),
        ScaleError::MalformedPayload(_) => (StatusCode::UNPROCESSABLE_ENTITY, "malformed_payload"),
        ScaleError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal_error"),
    };
    ApiError::new(status, code, e.to_string())
}

async fn targets(State(s): State<Arc<MetricsGatewayState>>) -> Result<Json<Vec<TargetGroup>>, ApiError> {
    discovery_targets(s.store.as_ref())
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))
}

async fn scale(
    State(s): State<Arc<MetricsGatewayState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<ScaleOutcome>, ApiError> {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    s.controller.authorize(auth).map_err(scale_error)?;
    let cmd = ScaleCommand::from_json(&body).map_err(scale_error)?;
    let outcome = s.controller.apply(&cmd).map_err(scale_error)?;
    tracing::info!(
        action = "scale_webhook",
        model = %outcome.model_name,
        previous = outcome.previous_desired,
        desired = outcome.desired_instances,
        clamped = outcome.clamped,
        duplicate = outcome.duplicate,
    );
    Ok(Json(outcome))
}

async fn metrics(State(s): State<Arc<MetricsGatewayState>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, EXPOSITION_CONTENT_TYPE)], s.metrics.render())
}

async fn series(State(s): State<Arc<MetricsGatewayState>>) -> Json<Vec<MetricSeries>> {
    Json(s.series.read().unwrap_or_else(|p| p.into_inner()).clone())
}
