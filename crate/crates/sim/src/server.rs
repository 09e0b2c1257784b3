//! The mock inference server over HTTP: the vLLM subset the control plane
//! and the benchmark talk to (`/health`, `/metrics`, `/v1/models`,
//! `/v1/completions`, `/v1/chat/completions`), backed by
//! [`MockServerModel`] in real time.
//!
//! All state changes go through one lock around the model; a driver task
//! processes completions at their exact instants so queued requests are
//! admitted on time. Tokens are written at the absolute deadlines the model
//! assigned at admission.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use llmscale_core::auth::bearer_token;
use llmscale_core::routing::{InferenceKind, InferenceRequest};
use llmscale_core::Timestamp;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch, Notify};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::profile::MockServerProfile;
use crate::server_model::{Admission, Gauges, MockServerModel, RequestId, ServerEvent};

#[derive(Clone, Debug)]
pub struct MockServerConfig {
    /// Name accepted in the `model` field.
    pub model_name: String,
    /// Token clients must present as `Authorization: Bearer ...`.
    pub bearer_token: String,
    pub profile: MockServerProfile,
    pub seed: u64,
    /// `/health` returns 503 until this long after start; never 200 when `None`.
    pub healthy_after: Option<Duration>,
}

struct Core {
    model: MockServerModel,
    waiters: HashMap<RequestId, oneshot::Sender<Admission>>,
    next_id: u64,
}

struct Shared {
    config: MockServerConfig,
    base: Instant,
    core: Mutex<Core>,
    wake: Notify,
    shutdown: watch::Receiver<bool>,
}

impl Shared {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.base.elapsed().as_millis() as u64)
    }

    fn instant(&self, t: Timestamp) -> Instant {
        self.base + Duration::from_millis(t.as_millis())
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn is_shut_down(&self) -> bool {
        *self.shutdown.borrow()
    }
}

fn dispatch(core: &mut Core, events: Vec<ServerEvent>) {
    for event in events {
        if let ServerEvent::Admitted(a) = event {
            if let Some(tx) = core.waiters.remove(&a.id) {
                let _ = tx.send(a);
            }
        }
    }
}

/// Cancels the request in the model unless disarmed, e.g. when the client
/// disconnects mid-stream.
struct CancelGuard {
    shared: Arc<Shared>,
    id: RequestId,
    armed: bool,
}

impl CancelGuard {
    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for CancelGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        let now = self.shared.now();
        let mut core = self.shared.lock();
        core.waiters.remove(&self.id);
        let events = core.model.cancel(self.id, now);
        dispatch(&mut core, events);
        drop(core);
        self.shared.wake.notify_one();
    }
}

/// A running mock server. Dropping the handle stops it and breaks open
/// streams.
pub struct MockServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn gauges(&self) -> Gauges {
        let now = self.shared.now();
        let mut core = self.shared.lock();
        let events = core.model.advance_to(now);
        dispatch(&mut core, events);
        core.model.gauges(now)
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Binds `addr` and serves a mock server there.
pub async fn spawn(config: MockServerConfig, addr: SocketAddr) -> std::io::Result<MockServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    serve(config, listener)
}

pub fn serve(config: MockServerConfig, listener: TcpListener) -> std::io::Result<MockServerHandle> {
    let addr = listener.local_addr()?;
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let model = MockServerModel::new(config.profile.clone(), config.seed, Timestamp::from_millis(0));
    let shared = Arc::new(Shared {
        config,
        base: Instant::now(),
        core: Mutex::new(Core {
            model,
            waiters: HashMap::new(),
            next_id: 0,
        }),
        wake: Notify::new(),
        shutdown: shutdown_rx,
    });
    let app = router(shared.clone());
    let server = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::warn!(error = %e, "mock server stopped");
        }
    });
    let driver = tokio::spawn(drive(shared.clone()));
    Ok(MockServerHandle {
        addr,
        shared,
        shutdown: shutdown_tx,
        tasks: vec![server, driver],
    })
}

async fn drive(shared: Arc<Shared>) {
    loop {
        let notified = shared.wake.notified();
        let next = shared.lock().model.next_wakeup();
        match next {
            Some(t) => {
                tokio::select! {
                    _ = tokio::time::sleep_until(shared.instant(t)) => {}
                    _ = notified => {}
                }
            }
            None => notified.await,
        }
        let now = shared.now();
        let mut core = shared.lock();
        let events = core.model.advance_to(now);
        dispatch(&mut core, events);
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/v1/models", get(models))
        .route("/v1/completions", post(completions))
        .route("/v1/chat/completions", post(chat_completions))
        .with_state(shared)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let kind = match status {
        StatusCode::UNAUTHORIZED => "authentication_error",
        StatusCode::NOT_FOUND => "not_found_error",
        StatusCode::SERVICE_UNAVAILABLE => "unavailable",
        _ => "invalid_request_error",
    };
    (
        status,
        Json(json!({"error": {"message": message.into(), "type": kind, "code": status.as_u16()}})),
    )
        .into_response()
}

async fn health(State(s): State<Arc<Shared>>) -> StatusCode {
    let up = s
        .config
        .healthy_after
        .is_some_and(|d| s.base.elapsed() >= d);
    if up && !s.is_shut_down() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    }
}

async fn metrics(State(s): State<Arc<Shared>>) -> Response {
    let now = s.now();
    let mut core = s.lock();
    let events = core.model.advance_to(now);
    dispatch(&mut core, events);
    let text = core.model.metrics_text(now);
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], text).into_response()
}

async fn models(State(s): State<Arc<Shared>>) -> Json<Value> {
    Json(json!({
        "object": "list",
        "data": [{"id": s.config.model_name, "object": "model", "owned_by": "llmscale-sim"}],
    }))
}

async fn completions(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    generate(s, InferenceKind::Completion, headers, body).await
}

async fn chat_completions(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    generate(s, InferenceKind::Chat, headers, body).await
}

fn count_words(v: &Value) -> u64 {
    match v {
        Value::String(s) => s.split_whitespace().count() as u64,
        Value::Array(items) => items.iter().map(count_words).sum(),
        Value::Object(m) => m.get("content").map_or(0, count_words),
        _ => 0,
    }
}

/// Rough prompt size for usage accounting: whitespace-separated words.
fn prompt_tokens(req: &InferenceRequest) -> u64 {
    let field = match req.kind {
        InferenceKind::Chat => "messages",
        InferenceKind::Completion => "prompt",
    };
    req.body.get(field).map_or(0, count_words)
}

struct Reply {
    kind: InferenceKind,
    id: String,
    created: u64,
    model: String,
    prompt_tokens: u64,
    finish_reason: &'static str,
}

impl Reply {
    fn chunk(&self, delta: Value, finish: Option<&str>) -> String {
        let choice = match self.kind {
            InferenceKind::Chat => json!({"index": 0, "delta": delta, "logprobs": null, "finish_reason": finish}),
            InferenceKind::Completion => json!({
                "index": 0,
                "text": delta.get("content").cloned().unwrap_or(json!("")),
                "logprobs": null,
                "finish_reason": finish,
            }),
        };
        self.event(json!({
            "id": self.id,
            "object": self.object(true),
            "created": self.created,
            "model": self.model,
            "choices": [choice],
        }))
    }

    fn usage(&self, completion_tokens: u64) -> Value {
        json!({
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": self.prompt_tokens + completion_tokens,
        })
    }

    fn usage_chunk(&self, completion_tokens: u64) -> String {
        self.event(json!({
            "id": self.id,
            "object": self.object(true),
            "created": self.created,
            "model": self.model,
            "choices": [],
            "usage": self.usage(completion_tokens),
        }))
    }

    fn object(&self, stream: bool) -> &'static str {
        match (self.kind, stream) {
            (InferenceKind::Chat, true) => "chat.completion.chunk",
            (InferenceKind::Chat, false) => "chat.completion",
            (InferenceKind::Completion, _) => "text_completion",
        }
    }

    fn event(&self, v: Value) -> String {
        format!("data: {v}\n\n")
    }

    fn full(&self, text: String, completion_tokens: u64) -> Value {
        let choice = match self.kind {
            InferenceKind::Chat => json!({
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "logprobs": null,
                "finish_reason": self.finish_reason,
            }),
            InferenceKind::Completion => json!({
                "index": 0,
                "text": text,
                "logprobs": null,
                "finish_reason": self.finish_reason,
            }),
        };
        json!({
            "id": self.id,
            "object": self.object(false),
            "created": self.created,
            "model": self.model,
            "choices": [choice],
            "usage": self.usage(completion_tokens),
        })
    }
}

fn token_text(i: usize) -> String {
    format!("tok{i} ")
}

async fn generate(s: Arc<Shared>, kind: InferenceKind, headers: HeaderMap, body: Bytes) -> Response {
    if s.is_shut_down() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down");
    }
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if bearer_token(auth) != Some(s.config.bearer_token.as_str()) {
        return error(StatusCode::UNAUTHORIZED, "invalid bearer token");
    }
    let req = match InferenceRequest::parse(kind, &body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    if req.model != s.config.model_name {
        return error(StatusCode::NOT_FOUND, format!("model {:?} is not served here", req.model));
    }
    let ignore_eos = req.body.get("ignore_eos").and_then(Value::as_bool).unwrap_or(false);
    let max_tokens = req.max_tokens();

    let (admitted, guard, output_len) = {
        let now = s.now();
        let mut core = s.lock();
        let id = RequestId(core.next_id);
        core.next_id += 1;
        let len = core.model.sample_output_len(max_tokens, ignore_eos);
        let (tx, rx) = oneshot::channel();
        core.waiters.insert(id, tx);
        let events = core.model.submit(id, now, len);
        dispatch(&mut core, events);
        let guard = CancelGuard {
            shared: s.clone(),
            id,
            armed: true,
        };
        (rx, guard, len)
    };
    s.wake.notify_one();

    let reply = Reply {
        kind,
        id: format!("cmpl-{}", guard.id.0),
        created: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs(),
        model: req.model.clone(),
        prompt_tokens: prompt_tokens(&req),
        finish_reason: if max_tokens.is_some_and(|m| u64::from(output_len) >= m) {
            "length"
        } else {
            "stop"
        },
    };

    if req.stream {
        stream_reply(s, reply, admitted, guard)
    } else {
        whole_reply(s, reply, admitted, guard).await
    }
}

async fn whole_reply(
    s: Arc<Shared>,
    reply: Reply,
    admitted: oneshot::Receiver<Admission>,
    mut guard: CancelGuard,
) -> Response {
    let mut shutdown = s.shutdown.clone();
    let admission = tokio::select! {
        a = admitted => a,
        _ = shutdown.changed() => return error(StatusCode::SERVICE_UNAVAILABLE, "server stopped"),
    };
    let Ok(admission) = admission else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "request dropped");
    };
    tokio::select! {
        _ = tokio::time::sleep_until(s.instant(admission.last_token_at())) => {}
        _ = shutdown.changed() => return error(StatusCode::SERVICE_UNAVAILABLE, "server stopped"),
    }
    guard.disarm();
    let n = admission.token_times.len();
    let text: String = (0..n).map(token_text).collect();
    Json(reply.full(text, n as u64)).into_response()
}

fn stream_reply(
    s: Arc<Shared>,
    reply: Reply,
    admitted: oneshot::Receiver<Admission>,
    mut guard: CancelGuard,
) -> Response {
    let (tx, rx) = mpsc::channel::<String>(8);
    let mut shutdown = s.shutdown.clone();
    tokio::spawn(async move {
        let admission = tokio::select! {
            a = admitted => a,
            _ = tx.closed() => return,
            _ = shutdown.changed() => return,
        };
        let Ok(admission) = admission else {
            return;
        };
        if reply.kind == InferenceKind::Chat
            && tx.send(reply.chunk(json!({"role": "assistant"}), None)).await.is_err()
        {
            return;
        }
        for (i, t) in admission.token_times.iter().enumerate() {
            tokio::select! {
                _ = tokio::time::sleep_until(s.instant(*t)) => {}
                _ = tx.closed() => return,
                _ = shutdown.changed() => return,
            }
            if tx.send(reply.chunk(json!({"content": token_text(i)}), None)).await.is_err() {
                return;
            }
        }
        guard.disarm();
        let n = admission.token_times.len() as u64;
        for msg in [
            reply.chunk(json!({}), Some(reply.finish_reason)),
            reply.usage_chunk(n),
            "data: [DONE]\n\n".to_string(),
        ] {
            if tx.send(msg).await.is_err() {
                return;
            }
        }
    });
    let body = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|msg| (Ok::<_, std::convert::Infallible>(msg), rx))
    });
    (
        [
            (header::CONTENT_TYPE, "text/event-stream"),
            (header::CACHE_CONTROL, "no-cache"),
        ],
        Body::from_stream(body),
    )
        .into_response()
}
