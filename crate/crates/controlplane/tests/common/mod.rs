#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use llmscale_controlplane::web_gateway::{self, GatewayState};
use llmscale_core::auth::{Authenticator, KeyDigester, LocalAuthCache};
use llmscale_core::model::AuthId;
use llmscale_core::routing::Router;
use llmscale_core::telemetry::ControlPlaneMetrics;
use llmscale_core::{
    ConfigurationId, Endpoint, EndpointId, EndpointJob, EndpointJobId, JobState, MemoryStore, ModelConfiguration,
    StateStore, StoreError, StoreExt, SystemClock, Tenant, TenantAuthentication, TenantId, Timestamp,
};
use llmscale_sim::server::{serve, MockServerConfig, MockServerHandle};
use llmscale_sim::{MockServerProfile, OutputLen};
use tokio::net::TcpListener;
use tokio::sync::Notify;

pub const API_KEY: &str = "sk-test-key";
pub const KEY_SECRET: &str = "test-key-secret";

pub fn ts(ms: u64) -> Timestamp {
    Timestamp::from_millis(ms)
}

/// A store with one enabled configuration per model and a tenant holding
/// [`API_KEY`].
pub fn seeded_store(models: &[&str]) -> Arc<MemoryStore> {
    let store = Arc::new(MemoryStore::new());
    let digest = KeyDigester::new(KEY_SECRET).digest(API_KEY);
    store
        .transact(|tx| {
            for m in models {
                let id = ConfigurationId(tx.allocate_id()?);
                tx.insert_configuration(ModelConfiguration::new(id, *m, "vllm").with_instances(0, 0, 8))?;
            }
            let tenant = TenantId(tx.allocate_id()?);
            tx.insert_tenant(Tenant {
                id: tenant,
                name: "tenant".into(),
                created_at: ts(0),
            })?;
            let auth = AuthId(tx.allocate_id()?);
            tx.insert_authentication(TenantAuthentication {
                id: auth,
                tenant_id: tenant,
                key_digest: digest,
                label: "test".into(),
                created_at: ts(0),
                revoked_at: None,
            })
        })
        .unwrap();
    store
}

/// Inserts a job and an endpoint at `addr`; the endpoint is ready when
/// `ready` is set.
pub fn add_endpoint(store: &MemoryStore, model: &str, addr: SocketAddr, token: &str, ready: bool) -> EndpointJobId {
    store
        .transact(|tx| {
            let config = tx.enabled_configuration_for(model).expect("configured model").id;
            let job_id = EndpointJobId(tx.allocate_id()?);
            let mut job = EndpointJob::submitted(job_id, config, format!("sched-{}", job_id.0), ts(0));
            job.registered_at = Some(ts(1));
            job.state = JobState::Registered;
            if ready {
                job.ready_at = Some(ts(2));
                job.state = JobState::Ready;
            }
            tx.insert_job(job)?;
            let id = EndpointId(tx.allocate_id()?);
            tx.insert_endpoint(Endpoint {
                id,
                endpoint_job_id: job_id,
                node_id: addr.ip().to_string(),
                port: addr.port(),
                model_name: model.to_string(),
                capabilities: BTreeSet::from(["chat".to_string(), "completions".to_string()]),
                bearer_token: token.to_string(),
                ready_at: ready.then(|| ts(2)),
            })?;
            Ok::<_, StoreError>(job_id)
        })
        .unwrap()
}

pub fn profile(capacity: u32, ttft_ms: u64, tpot_ms: u64, n: u32) -> MockServerProfile {
    MockServerProfile {
        concurrency_capacity: capacity,
        ttft_base: Duration::from_millis(ttft_ms),
        tpot_base: Duration::from_millis(tpot_ms),
        output_len: OutputLen::Fixed { n },
        jitter: 0.0,
    }
}

pub async fn mock_server(model: &str, token: &str, profile: MockServerProfile) -> MockServerHandle {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    serve(
        MockServerConfig {
            model_name: model.into(),
            bearer_token: token.into(),
            profile,
            seed: 0,
            healthy_after: Some(Duration::ZERO),
        },
        listener,
    )
    .unwrap()
}

/// A port nothing listens on.
pub async fn dead_addr() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    addr
}

pub struct Gateway {
    pub addr: SocketAddr,
    pub metrics: Arc<ControlPlaneMetrics>,
    pub recheck: Arc<Notify>,
    pub task: tokio::task::JoinHandle<()>,
}

impl Gateway {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn spawn_gateway(store: Arc<dyn StateStore>, auth_ttl: Duration) -> Gateway {
    let metrics = Arc::new(ControlPlaneMetrics::default());
    let recheck = Arc::new(Notify::new());
    let state = Arc::new(GatewayState {
        authenticator: Authenticator::new(
            store.clone(),
            KeyDigester::new(KEY_SECRET),
            Arc::new(LocalAuthCache::default()),
            auth_ttl,
            metrics.clone(),
        ),
        router: Router::new(store),
        clock: Arc::new(SystemClock),
        http: reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(1))
            .build()
            .unwrap(),
        metrics: metrics.clone(),
        recheck: recheck.clone(),
    });
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        axum::serve(listener, web_gateway::router(state)).await.unwrap();
    });
    Gateway {
        addr,
        metrics,
        recheck,
        task,
    }
}

/// What a [`Recorder`] upstream saw.
#[derive(Clone, Debug)]
pub struct Seen {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Bytes,
}

/// An upstream that records each request and answers with a fixed status,
/// content type and body.
pub struct Recorder {
    pub addr: SocketAddr,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for Recorder {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl Recorder {
    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

pub async fn recorder(status: StatusCode, content_type: &'static str, body: &'static str) -> Recorder {
    type Shared = (Arc<Mutex<Vec<Seen>>>, StatusCode, &'static str, &'static str);
    async fn handle(
        State((seen, status, content_type, body)): State<Shared>,
        uri: axum::http::Uri,
        headers: HeaderMap,
        request: Bytes,
    ) -> axum::response::Response {
        seen.lock().unwrap().push(Seen {
            path: uri.path().to_string(),
            authorization: headers
                .get("authorization")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string),
            body: request,
        });
        (status, [("content-type", content_type), ("x-upstream-secret", "hidden")], body).into_response()
    }
    let seen = Arc::new(Mutex::new(Vec::new()));
    let app = axum::Router::new()
        .route("/v1/chat/completions", post(handle))
        .route("/v1/completions", post(handle))
        .with_state((seen.clone(), status, content_type, body));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Recorder { addr, seen, task }
}

pub fn chat_body(model: &str, stream: bool) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "messages": [{"role": "user", "content": "hello there"}],
        "max_tokens": 4,
        "stream": stream,
    })
}

pub const CALLBACK_SECRET: &str = "test-callback-secret";
pub const INTERNAL_TOKEN: &str = "test-internal-token";

pub struct Service {
    pub addr: SocketAddr,
    pub metrics: Arc<ControlPlaneMetrics>,
    task: tokio::task::JoinHandle<()>,
}

impl Service {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve_app(app: axum::Router, metrics: Arc<ControlPlaneMetrics>) -> Service {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Service { addr, metrics, task }
}

pub async fn spawn_endpoint_gateway(store: Arc<dyn StateStore>, base_port: u16) -> Service {
    use llmscale_controlplane::endpoint_gateway::{self, EndpointGatewayState};
    use llmscale_core::auth::CallbackTokens;
    use llmscale_core::registration::Registrar;
    let metrics = Arc::new(ControlPlaneMetrics::default());
    let state = Arc::new(EndpointGatewayState {
        registrar: Registrar::new(store, CallbackTokens::new(CALLBACK_SECRET), base_port, metrics.clone()),
        clock: Arc::new(SystemClock),
    });
    serve_app(endpoint_gateway::router(state), metrics).await
}

pub async fn spawn_metrics_gateway(store: Arc<dyn StateStore>) -> Service {
    use llmscale_controlplane::metrics_gateway::{self, MetricsGatewayState};
    use llmscale_core::scaling::ScaleController;
    let metrics = Arc::new(ControlPlaneMetrics::default());
    let state = Arc::new(MetricsGatewayState {
        controller: Arc::new(ScaleController::new(store.clone(), INTERNAL_TOKEN, metrics.clone())),
        store,
        metrics: metrics.clone(),
        series: Arc::new(std::sync::RwLock::new(Vec::new())),
    });
    serve_app(metrics_gateway::router(state), metrics).await
}

/// Inserts a submitted job for `model` and returns its id.
pub fn add_submitted_job(store: &MemoryStore, model: &str) -> EndpointJobId {
    store
        .transact(|tx| {
            let config = tx.enabled_configuration_for(model).expect("configured model").id;
            let id = EndpointJobId(tx.allocate_id()?);
            tx.insert_job(EndpointJob::submitted(id, config, format!("sched-{}", id.0), ts(0)))?;
            Ok::<_, StoreError>(id)
        })
        .unwrap()
}

pub fn registration(job: EndpointJobId, node: &str) -> serde_json::Value {
    serde_json::json!({
        "endpoint_job_id": job.0,
        "scheduler_job_id": format!("sched-{}", job.0),
        "node_id": node,
        "model_version": "m-v1",
        "capabilities": ["chat"],
        "bearer_token": format!("server-token-{}", job.0),
    })
}

pub fn callback_token(job: EndpointJobId) -> String {
    llmscale_core::auth::CallbackTokens::new(CALLBACK_SECRET).token_for(job)
}

pub fn sd_validator() -> jsonschema::Validator {
    let schema: serde_json::Value = serde_json::from_str(include_str!("../fixtures/http_sd.schema.json")).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}
