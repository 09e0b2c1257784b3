//! Discrete-event simulation of the whole system under a manual clock: the
//! control plane's loops, the batch scheduler, the mock inference servers
//! and closed-loop clients.
//!
//! Events run one at a time in `(time, insertion order)`. Control-plane code
//! is the production code; its async calls complete without suspending
//! because every simulated dependency answers immediately.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use async_trait::async_trait;
use futures::executor::block_on;
use llmscale_core::auth::CallbackTokens;
use llmscale_core::health::{Decision, EndpointWorker, HealthProbe, DEFAULT_PROBE_CONCURRENCY};
use llmscale_core::jobs::{JobWorker, PassReport, ReconcilePass, Step};
use llmscale_core::registration::{RegistrationError, RegistrationRequest, Registrar};
use llmscale_core::routing::Router;
use llmscale_core::scaling::{Evaluator, MetricsScraper, ScaleController, ScaleError, ScaleOutcome};
use llmscale_core::store::{StateStore, StoreError, StoreExt};
use llmscale_core::submit::{
    BatchTemplate, SchedulerBackend, SchedulerError, ScriptParameters, SubmitService, TemplateCatalog,
};
use llmscale_core::telemetry::ControlPlaneMetrics;
use llmscale_core::timing::RequestTiming;
use llmscale_core::{Clock, Endpoint, MemoryStore, ModelConfiguration, Timestamp};

use crate::clock::{ClockMode, SimClock};
use crate::error::SimError;
use crate::scenario::{ModelSpec, Scenario, SIM_TEMPLATE};
use crate::scheduler::{Placement, SimJob, SimScheduler};
use crate::server_model::{Admission, Gauges, MockServerModel, RequestId, ServerEvent};

pub const SIM_CALLBACK_URL: &str = "http://control-plane.sim/internal/endpoints/register";
pub const SIM_INTERNAL_TOKEN: &str = "sim-internal-token";
const CALLBACK_SECRET: &str = "sim-callback-secret";

type ServerKey = (String, u16);

#[derive(Clone, Debug, PartialEq, Eq)]
enum Event {
    ReconcileTick,
    ReconcileResume,
    SweepTick,
    ScrapeTick,
    JobStartup(String),
    ServerWake(ServerKey),
    ClientSend(usize),
}

struct Scheduled {
    at: Timestamp,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so that the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct MockServer {
    job_id: String,
    model_name: String,
    bearer_token: String,
    healthy_at: Option<Timestamp>,
    model: MockServerModel,
}

enum Notice {
    Placed(Placement),
    ServerEvents(ServerKey, Vec<ServerEvent>),
    ServerGone(ServerKey),
}

/// State reachable from both the engine and the simulated dependencies the
/// control plane calls into.
struct World {
    clock: SimClock,
    start: Timestamp,
    scheduler: SimScheduler,
    models: BTreeMap<String, ModelSpec>,
    servers: BTreeMap<ServerKey, MockServer>,
    outbox: Vec<Notice>,
    log: Vec<String>,
}

impl World {
    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn log(&mut self, msg: impl AsRef<str>) {
        let t = self.now().saturating_since(self.start).as_millis();
        self.log.push(format!("{:>6}.{:03} {}", t / 1000, t % 1000, msg.as_ref()));
    }

    fn server_of_job(&self, job_id: &str) -> Option<ServerKey> {
        self.servers
            .iter()
            .find(|(_, s)| s.job_id == job_id)
            .map(|(k, _)| k.clone())
    }
}

type SharedWorld = Arc<Mutex<World>>;

fn lock(world: &SharedWorld) -> MutexGuard<'_, World> {
    world.lock().unwrap_or_else(|p| p.into_inner())
}

struct SimBackend(SharedWorld);

#[async_trait]
impl SchedulerBackend for SimBackend {
    async fn submit(&self, _template_name: &str, script: &str) -> Result<String, SchedulerError> {
        let mut w = lock(&self.0);
        let params = ScriptParameters::from_script(script)
            .ok_or_else(|| SchedulerError::Rejected("script lacks submission parameters".into()))?;
        let delay = w
            .models
            .get(&params.model_name)
            .map(|m| m.startup_delay)
            .ok_or_else(|| SchedulerError::Rejected(format!("no sim profile for {:?}", params.model_name)))?;
        let now = w.now();
        let (id, placement) = w
            .scheduler
            .submit(script, delay, now)
            .map_err(SchedulerError::from)?;
        let node = placement.as_ref().map_or("-", |p| p.node_id.as_str()).to_string();
        w.log(format!(
            "sched submit job={id} model={} endpoint_job={} node={node}",
            params.model_name, params.endpoint_job_id
        ));
        if let Some(p) = placement {
            w.outbox.push(Notice::Placed(p));
        }
        Ok(id)
    }

    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError> {
        let mut w = lock(&self.0);
        let now = w.now();
        let outcome = w.scheduler.cancel(scheduler_job_id, now);
        if let Some(prev) = outcome.previous {
            w.log(format!("sched cancel job={scheduler_job_id} was={prev:?}"));
        }
        if let Some(key) = w.server_of_job(scheduler_job_id) {
            w.servers.remove(&key);
            w.outbox.push(Notice::ServerGone(key));
        }
        for p in outcome.placements {
            w.outbox.push(Notice::Placed(p));
        }
        Ok(())
    }
}

struct SimProbe(SharedWorld);

#[async_trait]
impl HealthProbe for SimProbe {
    async fn probe(&self, endpoint: &Endpoint) -> bool {
        let w = lock(&self.0);
        let now = w.now();
        w.servers
            .get(&(endpoint.node_id.clone(), endpoint.port))
            .and_then(|s| s.healthy_at)
            .is_some_and(|t| t <= now)
    }
}

struct SimScraper(SharedWorld);

#[async_trait]
impl MetricsScraper for SimScraper {
    async fn scrape(&self, endpoint: &Endpoint) -> Option<String> {
        let mut w = lock(&self.0);
        let now = w.now();
        let key = (endpoint.node_id.clone(), endpoint.port);
        let server = w.servers.get_mut(&key)?;
        if !server.healthy_at.is_some_and(|t| t <= now) || server.bearer_token != endpoint.bearer_token {
            return None;
        }
        let events = server.model.advance_to(now);
        let page = server.model.metrics_text(now);
        w.outbox.push(Notice::ServerEvents(key, events));
        Some(page)
    }
}

/// A scale-rule firing and what applying it did.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRecord {
    pub at: Timestamp,
    pub rule: String,
    pub model_name: String,
    pub value: f64,
    pub outcome: Result<ScaleOutcome, ScaleError>,
}

struct InFlight {
    load: usize,
    index: u64,
    sent_at: Timestamp,
    server: ServerKey,
    admission: Option<Admission>,
}

#[derive(Default)]
struct LoadState {
    issued: u64,
    active_slots: u32,
}

pub struct Simulation {
    scenario: Scenario,
    clock: SimClock,
    start: Timestamp,
    world: SharedWorld,
    store: Arc<MemoryStore>,
    metrics: Arc<ControlPlaneMetrics>,
    job_worker: JobWorker,
    endpoint_worker: EndpointWorker,
    evaluator: Evaluator,
    controller: ScaleController,
    registrar: Registrar,
    router: Router,
    scraper: SimScraper,
    agenda: BinaryHeap<Scheduled>,
    seq: u64,
    wakes: BTreeMap<ServerKey, Timestamp>,
    pass: Option<ReconcilePass>,
    pass_reports: Vec<(Timestamp, PassReport)>,
    loads: Vec<LoadState>,
    inflight: BTreeMap<RequestId, InFlight>,
    next_request: u64,
    next_index: u64,
    timings: Vec<RequestTiming>,
    firings: Vec<FiringRecord>,
}

impl Simulation {
    /// Builds the system from a manual-clock scenario, seeds the store with
    /// one configuration per model and runs everything due at the start.
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        if scenario.clock != ClockMode::Manual {
            return Err(SimError::Mode);
        }
        scenario.validate()?;
        let start = Timestamp::from_millis(scenario.start_ms);
        let clock = SimClock::manual(start);
        let world = Arc::new(Mutex::new(World {
            clock: clock.clone(),
            start,
            scheduler: SimScheduler::new(scenario.nodes.clone(), scenario.queue_when_full),
            models: scenario.models.iter().map(|m| (m.name.clone(), m.clone())).collect(),
            servers: BTreeMap::new(),
            outbox: Vec::new(),
            log: Vec::new(),
        }));

        let store = Arc::new(MemoryStore::new());
        let configs = scenario.configurations();
        store
            .transact(|tx| {
                tx.allocate_id()?;
                for c in &configs {
                    tx.insert_configuration(c.clone())?;
                }
                Ok::<_, StoreError>(())
            })
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let dyn_store: Arc<dyn StateStore> = store.clone();
        let metrics = Arc::new(ControlPlaneMetrics::default());
        let tokens = CallbackTokens::new(CALLBACK_SECRET);
        let catalog = TemplateCatalog::new(
            scenario
                .models
                .iter()
                .map(|m| BatchTemplate::parse(&m.template, SIM_TEMPLATE)),
        );
        let submitter = Arc::new(SubmitService::new(
            catalog,
            Arc::new(SimBackend(world.clone())),
            scenario.seed,
        ));
        let job_worker = JobWorker::new(
            dyn_store.clone(),
            submitter.clone(),
            tokens.clone(),
            SIM_CALLBACK_URL,
            metrics.clone(),
        );
        let endpoint_worker = EndpointWorker::new(
            dyn_store.clone(),
            Arc::new(SimProbe(world.clone())),
            submitter,
            DEFAULT_PROBE_CONCURRENCY,
            metrics.clone(),
        );
        let mut sim = Self {
            evaluator: Evaluator::new(scenario.rules.clone(), scenario.intervals.scrape),
            controller: ScaleController::new(dyn_store.clone(), SIM_INTERNAL_TOKEN, metrics.clone()),
            registrar: Registrar::new(dyn_store.clone(), tokens, scenario.base_port, metrics.clone()),
            router: Router::new(dyn_store),
            scraper: SimScraper(world.clone()),
            loads: scenario.load.iter().map(|_| LoadState::default()).collect(),
            scenario,
            clock,
            start,
            world,
            store,
            metrics,
            job_worker,
            endpoint_worker,
            agenda: BinaryHeap::new(),
            seq: 0,
            wakes: BTreeMap::new(),
            pass: None,
            pass_reports: Vec::new(),
            inflight: BTreeMap::new(),
            next_request: 0,
            next_index: 0,
            timings: Vec::new(),
            firings: Vec::new(),
        };
        sim.schedule(start, Event::ReconcileTick);
        sim.schedule(start, Event::SweepTick);
        sim.schedule(start, Event::ScrapeTick);
        for (i, l) in sim.scenario.load.clone().iter().enumerate() {
            sim.loads[i].active_slots = l.concurrency;
            for _ in 0..l.concurrency {
                sim.schedule(start + l.start_at, Event::ClientSend(i));
            }
        }
        sim.run_until(start);
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    /// Time since the simulation started.
    pub fn elapsed(&self) -> Duration {
        self.now().saturating_since(self.start)
    }

    pub fn store(&self) -> &Arc<MemoryStore> {
        &self.store
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn metrics(&self) -> &Arc<ControlPlaneMetrics> {
        &self.metrics
    }

    pub fn controller(&self) -> &ScaleController {
        &self.controller
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn event_log(&self) -> Vec<String> {
        lock(&self.world).log.clone()
    }

    pub fn timings(&self) -> &[RequestTiming] {
        &self.timings
    }

    pub fn firings(&self) -> &[FiringRecord] {
        &self.firings
    }

    /// Completed reconcile passes with their completion time.
    pub fn pass_reports(&self) -> &[(Timestamp, PassReport)] {
        &self.pass_reports
    }

    pub fn sim_jobs(&self) -> Vec<SimJob> {
        lock(&self.world).scheduler.jobs().cloned().collect()
    }

    pub fn configuration(&self, model: &str) -> Option<ModelConfiguration> {
        self.store
            .transact(|tx| Ok::<_, StoreError>(tx.enabled_configuration_for(model).cloned()))
            .ok()
            .flatten()
    }

    pub fn server_gauges(&self, node: &str, port: u16) -> Option<Gauges> {
        let w = lock(&self.world);
        let now = w.now();
        w.servers.get(&(node.to_string(), port)).map(|s| s.model.gauges(now))
    }

    /// Makes a mock server's `/health` answer 200 from now on.
    pub fn set_server_healthy(&mut self, node: &str, port: u16) -> bool {
        let mut w = lock(&self.world);
        let now = w.now();
        match w.servers.get_mut(&(node.to_string(), port)) {
            Some(s) => {
                s.healthy_at = Some(now);
                true
            }
            None => false,
        }
    }

    /// Crashes the server at `node:port`: its job fails and in-flight
    /// requests break. The control plane finds out through its own sweeps.
    pub fn kill_server(&mut self, node: &str, port: u16) -> bool {
        let key = (node.to_string(), port);
        {
            let mut w = lock(&self.world);
            let Some(server) = w.servers.remove(&key) else {
                return false;
            };
            let now = w.now();
            let placements = w.scheduler.mark_failed(&server.job_id, now).unwrap_or_default();
            w.log(format!("fault kill server {node}:{port} job={}", server.job_id));
            w.outbox.push(Notice::ServerGone(key));
            w.outbox.extend(placements.into_iter().map(Notice::Placed));
        }
        self.drain_outbox();
        true
    }

    /// Runs every event due in `(now, now + d]` and leaves the clock at
    /// `now + d`.
    pub fn advance(&mut self, d: Duration) -> Timestamp {
        let target = self.now() + d;
        self.run_until(target);
        target
    }

    pub fn run_until(&mut self, target: Timestamp) {
        while self.agenda.peek().is_some_and(|s| s.at <= target) {
            self.step_event();
        }
        if target > self.now() {
            self.clock.set(target).expect("manual clock");
        }
    }

    /// Runs one reconcile pass to completion, starting one if none is in
    /// progress, and returns its report. Other events keep running while
    /// the pass waits between submissions.
    pub fn reconcile_cycle(&mut self) -> PassReport {
        let done_before = self.pass_reports.len();
        if self.pass.is_none() {
            self.pass = Some(self.job_worker.begin_pass());
            self.drive_pass();
        }
        while self.pass_reports.len() == done_before {
            if self.agenda.is_empty() {
                break;
            }
            self.step_event();
        }
        self.pass_reports
            .get(done_before)
            .map(|(_, r)| r.clone())
            .unwrap_or_default()
    }

    fn schedule(&mut self, at: Timestamp, event: Event) {
        self.seq += 1;
        self.agenda.push(Scheduled {
            at: at.max(self.now()),
            seq: self.seq,
            event,
        });
    }

    fn log(&self, msg: impl AsRef<str>) {
        lock(&self.world).log(msg);
    }

    fn rel(&self, t: Timestamp) -> f64 {
        t.saturating_since(self.start).as_secs_f64()
    }

    fn step_event(&mut self) {
        let Some(next) = self.agenda.pop() else {
            return;
        };
        if next.at > self.now() {
            self.clock.set(next.at).expect("manual clock");
        }
        let now = self.now();
        match next.event {
            Event::ReconcileTick => {
                self.schedule(now + self.scenario.intervals.reconcile, Event::ReconcileTick);
                if self.pass.is_some() {
                    self.log("reconcile tick skipped: pass in progress");
                } else {
                    self.pass = Some(self.job_worker.begin_pass());
                    self.drive_pass();
                }
            }
            Event::ReconcileResume => self.drive_pass(),
            Event::SweepTick => {
                self.schedule(now + self.scenario.intervals.sweep, Event::SweepTick);
                self.sweep(now);
            }
            Event::ScrapeTick => {
                self.schedule(now + self.scenario.intervals.scrape, Event::ScrapeTick);
                self.scrape(now);
            }
            Event::JobStartup(id) => self.job_startup(&id, now),
            Event::ServerWake(key) => {
                if self.wakes.get(&key) == Some(&now) {
                    self.wakes.remove(&key);
                }
                let events = {
                    let mut w = lock(&self.world);
                    w.servers.get_mut(&key).map(|s| s.model.advance_to(now))
                };
                if let Some(events) = events {
                    self.on_server_events(&key, events);
                }
            }
            Event::ClientSend(load) => self.client_send(load, now),
        }
        self.drain_outbox();
    }

    fn drive_pass(&mut self) {
        let now = self.now();
        let Some(pass) = self.pass.as_mut() else {
            return;
        };
        match block_on(self.job_worker.step(pass, now)) {
            Step::Wait(d) => self.schedule(now + d, Event::ReconcileResume),
            Step::Done(report) => {
                self.pass = None;
                if !report.is_noop() || !report.errors.is_empty() {
                    let submitted: Vec<String> =
                        report.submitted.iter().map(|s| s.endpoint_job_id.to_string()).collect();
                    let cancelled: Vec<String> =
                        report.cancelled.iter().map(|(_, j)| j.to_string()).collect();
                    self.log(format!(
                        "reconcile pass submitted=[{}] cancelled=[{}] errors={}",
                        submitted.join(","),
                        cancelled.join(","),
                        report.errors.len()
                    ));
                }
                self.pass_reports.push((now, report));
            }
        }
    }

    fn sweep(&mut self, now: Timestamp) {
        let report = block_on(self.endpoint_worker.sweep(now));
        for (job, decision) in &report.decisions {
            if matches!(decision, Decision::MarkReady | Decision::Expire) {
                self.log(format!("sweep {decision:?} endpoint_job={job}"));
            }
        }
        for (job, err) in &report.errors {
            self.log(format!("sweep error endpoint_job={job}: {err}"));
        }
    }

    fn scrape(&mut self, now: Timestamp) {
        let report = block_on(self.evaluator.tick(now, &*self.store, &self.scraper, &self.controller));
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.log(format!("scrape error: {e}"));
                return;
            }
        };
        for (firing, outcome) in report.firings {
            let summary = match &outcome {
                Ok(o) => format!("desired {}->{}", o.previous_desired, o.desired_instances),
                Err(e) => format!("error {e}"),
            };
            self.log(format!(
                "firing rule={} model={} value={:.3} {summary}",
                firing.rule, firing.model_name, firing.value
            ));
            self.firings.push(FiringRecord {
                at: firing.at,
                rule: firing.rule,
                model_name: firing.model_name,
                value: firing.value,
                outcome,
            });
        }
    }

    /// The job's startup finished: it sends its registration callback and,
    /// if given a port, brings up its inference server there.
    fn job_startup(&mut self, job_id: &str, now: Timestamp) {
        let (params, node, spec) = {
            let w = lock(&self.world);
            let Some(job) = w.scheduler.startup_complete(job_id) else {
                return;
            };
            let node = job.node_id.clone().expect("starting job has a node");
            let spec = w.models.get(&job.params.model_name).cloned();
            (job.params.clone(), node, spec)
        };
        let body = registration_body(&params, job_id, &node);
        let result = serde_json::from_slice::<RegistrationRequest>(&body)
            .map_err(|e| RegistrationError::Invalid(e.to_string()))
            .and_then(|req| {
                self.registrar
                    .register(&req, Some(&format!("Bearer {}", params.callback_token)), now)
            });
        let mut w = lock(&self.world);
        match (result, spec) {
            (Ok(resp), Some(spec)) => {
                let seed = self.scenario.seed ^ job_id.parse::<u64>().unwrap_or(0).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let healthy_at = (!spec.never_healthy).then(|| now + spec.load_delay);
                w.servers.insert(
                    (node.clone(), resp.assigned_port),
                    MockServer {
                        job_id: job_id.to_string(),
                        model_name: params.model_name.clone(),
                        bearer_token: params.bearer_token.clone(),
                        healthy_at,
                        model: MockServerModel::new(spec.profile.clone(), seed, now),
                    },
                );
                w.scheduler.mark_running(job_id).expect("starting job can run");
                w.log(format!(
                    "job {job_id} registered endpoint_job={} at {node}:{}",
                    params.endpoint_job_id, resp.assigned_port
                ));
            }
            (result, _) => {
                let reason = result.err().map_or("no profile".to_string(), |e| e.to_string());
                w.log(format!("job {job_id} registration failed: {reason}"));
                let placements = w.scheduler.mark_failed(job_id, now).unwrap_or_default();
                w.outbox.extend(placements.into_iter().map(Notice::Placed));
            }
        }
    }

    fn client_send(&mut self, load: usize, now: Timestamp) {
        let spec = self.scenario.load[load].clone();
        let exhausted = spec.requests.is_some_and(|n| self.loads[load].issued >= n);
        let stopped = spec.stop_at.is_some_and(|s| now >= self.start + s);
        if exhausted || stopped {
            let state = &mut self.loads[load];
            state.active_slots -= 1;
            if state.active_slots == 0 {
                let issued = state.issued;
                self.log(format!("load {load} finished after {issued} requests"));
            }
            return;
        }
        self.loads[load].issued += 1;
        let index = self.next_index;
        self.next_index += 1;
        let endpoint = match self.router.select_endpoint(&spec.model) {
            Ok(e) => e,
            Err(e) => return self.client_failed(load, index, now, now, e.to_string()),
        };
        let key = (endpoint.node_id.clone(), endpoint.port);
        let events = {
            let mut w = lock(&self.world);
            match w.servers.get_mut(&key) {
                Some(s) if s.bearer_token == endpoint.bearer_token && s.model_name == spec.model => {
                    let id = RequestId(self.next_request);
                    self.next_request += 1;
                    let len = s.model.sample_output_len(spec.max_tokens, spec.ignore_eos);
                    self.inflight.insert(
                        id,
                        InFlight {
                            load,
                            index,
                            sent_at: now,
                            server: key.clone(),
                            admission: None,
                        },
                    );
                    Some(s.model.submit(id, now, len))
                }
                _ => None,
            }
        };
        match events {
            Some(events) => self.on_server_events(&key, events),
            None => self.client_failed(load, index, now, now, "upstream unreachable".into()),
        }
    }

    fn client_failed(&mut self, load: usize, index: u64, sent: Timestamp, now: Timestamp, error: String) {
        self.timings
            .push(RequestTiming::failure(index, self.rel(sent), self.rel(now), error));
        self.schedule(now + self.scenario.intervals.client_retry, Event::ClientSend(load));
    }

    fn on_server_events(&mut self, key: &ServerKey, events: Vec<ServerEvent>) {
        for event in events {
            match event {
                ServerEvent::Admitted(a) => {
                    if let Some(f) = self.inflight.get_mut(&a.id) {
                        f.admission = Some(a);
                    }
                }
                ServerEvent::Completed { id, at } => {
                    let Some(f) = self.inflight.remove(&id) else {
                        continue;
                    };
                    let a = f.admission.expect("completed requests were admitted");
                    self.timings.push(RequestTiming::success(
                        f.index,
                        self.rel(f.sent_at),
                        self.rel(a.first_token_at()),
                        self.rel(a.last_token_at()),
                        a.token_times.len() as u32,
                    ));
                    self.log(format!(
                        "request {} done on {}:{} tokens={} queued_ms={}",
                        f.index,
                        f.server.0,
                        f.server.1,
                        a.token_times.len(),
                        a.admitted_at.saturating_since(f.sent_at).as_millis()
                    ));
                    self.schedule(at, Event::ClientSend(f.load));
                }
            }
        }
        self.ensure_wake(key);
    }

    fn ensure_wake(&mut self, key: &ServerKey) {
        let next = lock(&self.world).servers.get(key).and_then(|s| s.model.next_wakeup());
        if let Some(t) = next {
            if self.wakes.get(key) != Some(&t) {
                self.wakes.insert(key.clone(), t);
                self.schedule(t, Event::ServerWake(key.clone()));
            }
        }
    }

    fn drain_outbox(&mut self) {
        loop {
            let notices = std::mem::take(&mut lock(&self.world).outbox);
            if notices.is_empty() {
                return;
            }
            let now = self.now();
            for notice in notices {
                match notice {
                    Notice::Placed(p) => self.schedule(now + p.startup_delay, Event::JobStartup(p.job_id)),
                    Notice::ServerEvents(key, events) => self.on_server_events(&key, events),
                    Notice::ServerGone(key) => {
                        self.wakes.remove(&key);
                        let broken: Vec<RequestId> = self
                            .inflight
                            .iter()
                            .filter(|(_, f)| f.server == key)
                            .map(|(id, _)| *id)
                            .collect();
                        for id in broken {
                            let f = self.inflight.remove(&id).expect("listed");
                            self.client_failed(f.load, f.index, f.sent_at, now, "connection reset".into());
                        }
                    }
                }
            }
        }
    }
}

/// The registration body a job's generated block sends, with the same field
/// encoding as its `printf`.
pub fn registration_body(params: &ScriptParameters, scheduler_job_id: &str, node_id: &str) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({
        "endpoint_job_id": params.endpoint_job_id,
        "scheduler_job_id": scheduler_job_id,
        "node_id": node_id,
        "model_version": params.model_version,
        "capabilities": params.capabilities,
        "bearer_token": params.bearer_token,
    }))
    .expect("json values serialize")
}
