//! The simulated scheduler in real time, for running the actual control
//! plane processes: jobs sleep through their startup delay, send the
//! registration callback over HTTP exactly like the generated script's
//! `curl`, and then serve a mock inference server on the assigned port.
//!
//! Node names are used as bind addresses, so they must be local IPs
//! (e.g. `127.0.0.1`, `127.0.0.2`).

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use async_trait::async_trait;
use llmscale_core::registration::RegistrationResponse;
use llmscale_core::submit::{SchedulerBackend, SchedulerError};
use llmscale_core::{Clock, SystemClock};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::engine::registration_body;
use crate::scenario::{ModelSpec, Scenario};
use crate::scheduler::{NodeSpec, Placement, SimJob, SimScheduler};
use crate::server::{serve, MockServerConfig, MockServerHandle};

struct Inner {
    scheduler: Mutex<SimScheduler>,
    models: BTreeMap<String, ModelSpec>,
    seed: u64,
    http: reqwest::Client,
    launches: Mutex<HashMap<String, JoinHandle<()>>>,
    servers: Mutex<HashMap<String, MockServerHandle>>,
    registrations_sent: AtomicU64,
}

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Clone)]
pub struct RealtimeSimBackend {
    inner: Arc<Inner>,
}

impl RealtimeSimBackend {
    pub fn new(nodes: Vec<NodeSpec>, queue_when_full: bool, models: Vec<ModelSpec>, seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                scheduler: Mutex::new(SimScheduler::new(nodes, queue_when_full)),
                models: models.into_iter().map(|m| (m.name.clone(), m)).collect(),
                seed,
                http: reqwest::Client::new(),
                launches: Mutex::new(HashMap::new()),
                servers: Mutex::new(HashMap::new()),
                registrations_sent: AtomicU64::new(0),
            }),
        }
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self::new(s.nodes.clone(), s.queue_when_full, s.models.clone(), s.seed)
    }

    pub fn jobs(&self) -> Vec<SimJob> {
        guard(&self.inner.scheduler).jobs().cloned().collect()
    }

    /// Where the job's mock server listens, once it runs.
    pub fn server_addr(&self, scheduler_job_id: &str) -> Option<SocketAddr> {
        guard(&self.inner.servers).get(scheduler_job_id).map(MockServerHandle::addr)
    }

    pub fn registrations_sent(&self) -> u64 {
        self.inner.registrations_sent.load(Ordering::Relaxed)
    }

    /// Stops a running job's server as if the job crashed.
    pub fn kill(&self, scheduler_job_id: &str) -> bool {
        let server = guard(&self.inner.servers).remove(scheduler_job_id);
        if server.is_none() {
            return false;
        }
        fail(&self.inner, scheduler_job_id);
        true
    }
}

fn launch(inner: &Arc<Inner>, p: Placement) {
    let id = p.job_id.clone();
    let task = tokio::spawn(run_job(inner.clone(), p));
    guard(&inner.launches).insert(id, task);
}

fn fail(inner: &Arc<Inner>, job_id: &str) {
    let placements = guard(&inner.scheduler)
        .mark_failed(job_id, SystemClock.now())
        .unwrap_or_default();
    for p in placements {
        launch(inner, p);
    }
}

async fn run_job(inner: Arc<Inner>, p: Placement) {
    tokio::time::sleep(p.startup_delay).await;
    let Some((params, spec)) = ({
        let sched = guard(&inner.scheduler);
        sched
            .startup_complete(&p.job_id)
            .and_then(|j| Some((j.params.clone(), inner.models.get(&j.params.model_name)?.clone())))
    }) else {
        return;
    };
    let body = registration_body(&params, &p.job_id, &p.node_id);
    inner.registrations_sent.fetch_add(1, Ordering::Relaxed);
    let response = inner
        .http
        .post(&params.callback_url)
        .bearer_auth(&params.callback_token)
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(body)
        .send()
        .await;
    let port = match response {
        Ok(r) if r.status().is_success() => r.json::<RegistrationResponse>().await.ok().map(|r| r.assigned_port),
        Ok(r) => {
            tracing::warn!(job = %p.job_id, status = %r.status(), "registration refused");
            None
        }
        Err(e) => {
            tracing::warn!(job = %p.job_id, error = %e, "registration failed");
            None
        }
    };
    let Some(port) = port else {
        return fail(&inner, &p.job_id);
    };
    let listener = match TcpListener::bind((p.node_id.as_str(), port)).await {
        Ok(l) => l,
        Err(e) => {
            tracing::warn!(job = %p.job_id, node = %p.node_id, port, error = %e, "cannot bind mock server");
            return fail(&inner, &p.job_id);
        }
    };
    let config = MockServerConfig {
        model_name: params.model_name.clone(),
        bearer_token: params.bearer_token.clone(),
        profile: spec.profile.clone(),
        seed: inner.seed ^ p.job_id.parse::<u64>().unwrap_or(0),
        healthy_after: (!spec.never_healthy).then_some(spec.load_delay),
    };
    let handle = match serve(config, listener) {
        Ok(h) => h,
        Err(_) => return fail(&inner, &p.job_id),
    };
    let mut sched = guard(&inner.scheduler);
    if sched.mark_running(&p.job_id).is_ok() {
        tracing::info!(job = %p.job_id, addr = %handle.addr(), "sim job running");
        guard(&inner.servers).insert(p.job_id.clone(), handle);
    }
}

#[async_trait]
impl SchedulerBackend for RealtimeSimBackend {
    async fn submit(&self, _template_name: &str, script: &str) -> Result<String, SchedulerError> {
        let model = llmscale_core::submit::ScriptParameters::from_script(script)
            .map(|p| p.model_name)
            .ok_or_else(|| SchedulerError::Rejected("script lacks submission parameters".into()))?;
        let delay = self
            .inner
            .models
            .get(&model)
            .map(|m| m.startup_delay)
            .ok_or_else(|| SchedulerError::Rejected(format!("no sim profile for {model:?}")))?;
        let (id, placement) = guard(&self.inner.scheduler)
            .submit(script, delay, SystemClock.now())
            .map_err(SchedulerError::from)?;
        if let Some(p) = placement {
            launch(&self.inner, p);
        }
        Ok(id)
    }

    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError> {
        let outcome = guard(&self.inner.scheduler).cancel(scheduler_job_id, SystemClock.now());
        if let Some(task) = guard(&self.inner.launches).remove(scheduler_job_id) {
            task.abort();
        }
        guard(&self.inner.servers).remove(scheduler_job_id);
        for p in outcome.placements {
            launch(&self.inner, p);
        }
        Ok(())
    }
}
