//! Wiring: builds every service from a [`Config`] and runs them together.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use llmscale_core::auth::{generate_secret, Authenticator, CallbackTokens, KeyDigester, LocalAuthCache};
use llmscale_core::health::EndpointWorker;
use llmscale_core::jobs::JobWorker;
use llmscale_core::model::AuthId;
use llmscale_core::registration::Registrar;
use llmscale_core::routing::Router;
use llmscale_core::scaling::{Evaluator, ScaleController};
use llmscale_core::submit::{BatchTemplate, CommandBackend, SchedulerBackend, SubmitService, TemplateCatalog};
use llmscale_core::telemetry::ControlPlaneMetrics;
use llmscale_core::{
    Clock, ConfigurationId, FileStore, MemoryStore, StateStore, StoreError, StoreExt, SystemClock, Tenant,
    TenantAuthentication, TenantId,
};
use llmscale_sim::scenario::SIM_TEMPLATE;
use llmscale_sim::RealtimeSimBackend;
use rand::SeedableRng;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;

use crate::config::{BackendKind, Config, ConfigError};
use crate::endpoint_gateway::{self, EndpointGatewayState};
use crate::http_clients::{HttpProbe, HttpScraper};
use crate::metrics_gateway::{self, MetricsGatewayState};
use crate::web_gateway::{self, GatewayState};
use crate::{line_protocol, loops};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("templates: {0}")]
    Templates(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("http client: {0}")]
    Http(String),
}

fn secret_or_random(value: &Option<String>, what: &str) -> String {
    match value {
        Some(v) if !v.is_empty() => v.clone(),
        _ => {
            tracing::warn!("no {what} configured; using a random one for this process");
            generate_secret("", &mut rand::rngs::StdRng::from_os_rng())
        }
    }
}

/// Everything that does not need a socket yet.
pub struct ControlPlane {
    pub config: Config,
    pub store: Arc<dyn StateStore>,
    pub metrics: Arc<ControlPlaneMetrics>,
    pub digester: KeyDigester,
    pub callback_tokens: CallbackTokens,
    pub internal_token: String,
    pub submit: Arc<SubmitService>,
    /// Set when the sim backend is configured.
    pub sim: Option<RealtimeSimBackend>,
}

impl ControlPlane {
    pub fn build(config: Config) -> Result<Self, AppError> {
        config.validate()?;
        let store: Arc<dyn StateStore> = match &config.store.path {
            Some(p) => Arc::new(FileStore::open(p)?),
            None => Arc::new(MemoryStore::new()),
        };
        Self::with_store(config, store)
    }

    pub fn with_store(config: Config, store: Arc<dyn StateStore>) -> Result<Self, AppError> {
        let catalog = load_catalog(&config)?;
        let sim = (config.scheduler.backend == BackendKind::Sim).then(|| {
            RealtimeSimBackend::new(
                config.scheduler.sim_nodes.clone(),
                config.scheduler.sim_queue_when_full,
                config.models.clone(),
                config.scheduler.seed.unwrap_or(0),
            )
        });
        let backend: Arc<dyn SchedulerBackend> = match &sim {
            Some(s) => Arc::new(s.clone()),
            None => Arc::new(CommandBackend::new(
                config.scheduler.command.clone(),
                config.scheduler.cancel_command.clone(),
            )),
        };
        let seed = config.scheduler.seed.unwrap_or_else(rand::random);
        let submit = Arc::new(SubmitService::new(catalog, backend, seed));
        let cp = Self {
            digester: KeyDigester::new(secret_or_random(&config.secrets.key_secret, "key secret")),
            callback_tokens: CallbackTokens::new(secret_or_random(&config.secrets.callback_secret, "callback secret")),
            internal_token: secret_or_random(&config.secrets.internal_token, "internal token"),
            metrics: Arc::new(ControlPlaneMetrics::default()),
            store,
            submit,
            sim,
            config,
        };
        cp.seed_models()?;
        Ok(cp)
    }

    /// Creates configurations for configured models that have none yet.
    fn seed_models(&self) -> Result<(), StoreError> {
        self.store.transact(|tx| {
            for spec in &self.config.models {
                if tx.enabled_configuration_for(&spec.name).is_some() {
                    continue;
                }
                let id = ConfigurationId(tx.allocate_id()?);
                tx.insert_configuration(spec.configuration(id))?;
                tracing::info!(action = "seed_configuration", model = %spec.name, configuration_id = %id.0);
            }
            Ok(())
        })
    }

    /// Issues a new API key for `tenant_name`, creating the tenant if needed.
    /// Returns the plaintext key; only its digest is stored.
    pub fn add_api_key(&self, tenant_name: &str, label: &str) -> Result<String, StoreError> {
        let key = generate_secret("sk-", &mut rand::rngs::StdRng::from_os_rng());
        let digest = self.digester.digest(&key);
        let now = SystemClock.now();
        self.store.transact(|tx| {
            let existing = tx.tables().tenants.values().find(|t| t.name == tenant_name).map(|t| t.id);
            let tenant_id = match existing {
                Some(id) => id,
                None => {
                    let id = TenantId(tx.allocate_id()?);
                    tx.insert_tenant(Tenant {
                        id,
                        name: tenant_name.to_string(),
                        created_at: now,
                    })?;
                    id
                }
            };
            let id = AuthId(tx.allocate_id()?);
            tx.insert_authentication(TenantAuthentication {
                id,
                tenant_id,
                key_digest: digest,
                label: label.to_string(),
                created_at: now,
                revoked_at: None,
            })
        })?;
        Ok(key)
    }

    /// Binds all listeners and starts the services and loops.
    pub async fn start(self) -> Result<RunningControlPlane, AppError> {
        let c = &self.config;
        let bind = |addr: SocketAddr| async move { TcpListener::bind(addr).await.map_err(|source| AppError::Bind { addr, source }) };
        let gateway_listener = bind(c.gateway.listen).await?;
        let endpoint_listener = bind(c.endpoint_gateway.listen).await?;
        let metrics_listener = bind(c.metrics_gateway.listen).await?;
        let line_listener = match c.scheduler.line_listen {
            Some(a) => Some(bind(a).await?),
            None => None,
        };
        let addr = |l: &TcpListener| l.local_addr().map_err(|source| AppError::Bind { addr: c.gateway.listen, source });
        let gateway_addr = addr(&gateway_listener)?;
        let endpoint_gateway_addr = addr(&endpoint_listener)?;
        let metrics_gateway_addr = addr(&metrics_listener)?;
        let line_addr = line_listener.as_ref().map(addr).transpose()?;
        let callback_url = c.endpoint_gateway.effective_callback_url(endpoint_gateway_addr);

        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let upstream = reqwest::Client::builder()
            .connect_timeout(c.gateway.connect_timeout)
            .build()
            .map_err(|e| AppError::Http(e.to_string()))?;
        let recheck = Arc::new(Notify::new());
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let mut tasks: Vec<JoinHandle<()>> = Vec::new();

        let gateway = web_gateway::router(Arc::new(GatewayState {
            authenticator: Authenticator::new(
                self.store.clone(),
                self.digester.clone(),
                Arc::new(LocalAuthCache::default()),
                c.gateway.auth_cache_ttl,
                self.metrics.clone(),
            ),
            router: Router::new(self.store.clone()),
            clock: clock.clone(),
            http: upstream.clone(),
            metrics: self.metrics.clone(),
            recheck: recheck.clone(),
        }));
        let endpoints = endpoint_gateway::router(Arc::new(EndpointGatewayState {
            registrar: Registrar::new(
                self.store.clone(),
                self.callback_tokens.clone(),
                c.endpoint_gateway.base_port,
                self.metrics.clone(),
            ),
            clock: clock.clone(),
        }));
        let controller = Arc::new(ScaleController::new(
            self.store.clone(),
            self.internal_token.clone(),
            self.metrics.clone(),
        ));
        let series = Arc::new(RwLock::new(Vec::new()));
        let metrics_app = metrics_gateway::router(Arc::new(MetricsGatewayState {
            store: self.store.clone(),
            controller: controller.clone(),
            metrics: self.metrics.clone(),
            series: series.clone(),
        }));

        for (name, listener, app) in [
            ("web gateway", gateway_listener, gateway),
            ("endpoint gateway", endpoint_listener, endpoints),
            ("metrics gateway", metrics_listener, metrics_app),
        ] {
            let mut stop = shutdown_rx.clone();
            tasks.push(tokio::spawn(async move {
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = stop.wait_for(|s| *s).await;
                    })
                    .await;
                if let Err(e) = served {
                    tracing::error!(service = name, error = %e, "server stopped");
                }
            }));
        }
        if let Some(listener) = line_listener {
            let service = self.submit.clone();
            tasks.push(tokio::spawn(async move {
                if let Err(e) = line_protocol::serve(listener, service).await {
                    tracing::error!(error = %e, "submit listener stopped");
                }
            }));
        }

        let job_worker = Arc::new(JobWorker::new(
            self.store.clone(),
            self.submit.clone(),
            self.callback_tokens.clone(),
            callback_url.clone(),
            self.metrics.clone(),
        ));
        tasks.push(tokio::spawn(loops::run_job_worker(
            job_worker,
            c.job_worker.reconcile_interval,
            shutdown_rx.clone(),
        )));
        let endpoint_worker = Arc::new(EndpointWorker::new(
            self.store.clone(),
            Arc::new(HttpProbe::new(upstream.clone(), c.endpoint_worker.probe_timeout)),
            self.submit.clone(),
            c.endpoint_worker.probe_concurrency,
            self.metrics.clone(),
        ));
        tasks.push(tokio::spawn(loops::run_endpoint_worker(
            endpoint_worker,
            c.endpoint_worker.sweep_interval,
            recheck,
            shutdown_rx.clone(),
        )));
        tasks.push(tokio::spawn(loops::run_evaluator(
            Evaluator::new(c.metrics_gateway.rules.clone(), c.metrics_gateway.scrape_interval),
            c.metrics_gateway.scrape_interval,
            self.store.clone(),
            Arc::new(HttpScraper::new(upstream, c.metrics_gateway.scrape_timeout)),
            controller,
            series,
            shutdown_rx,
        )));

        tracing::info!(
            gateway = %gateway_addr,
            endpoint_gateway = %endpoint_gateway_addr,
            metrics_gateway = %metrics_gateway_addr,
            callback_url = %callback_url,
            "control plane started"
        );
        Ok(RunningControlPlane {
            gateway_addr,
            endpoint_gateway_addr,
            metrics_gateway_addr,
            line_addr,
            callback_url,
            internal_token: self.internal_token.clone(),
            store: self.store.clone(),
            metrics: self.metrics.clone(),
            sim: self.sim.clone(),
            shutdown: shutdown_tx,
            tasks,
        })
    }
}

fn load_catalog(config: &Config) -> Result<TemplateCatalog, AppError> {
    let dir = &config.scheduler.templates_dir;
    let loaded = if dir.is_dir() {
        TemplateCatalog::load_dir(dir).map_err(|e| AppError::Templates(e.to_string()))?
    } else {
        TemplateCatalog::default()
    };
    let mut templates: Vec<BatchTemplate> = loaded.names().filter_map(|n| loaded.get(n).cloned()).collect();
    for model in &config.models {
        if templates.iter().any(|t| t.name == model.template) {
            continue;
        }
        if config.scheduler.backend == BackendKind::Sim {
            templates.push(BatchTemplate::parse(model.template.clone(), SIM_TEMPLATE));
        } else {
            return Err(AppError::Templates(format!(
                "model {:?} uses template {:?}, which is not in {}",
                model.name,
                model.template,
                dir.display()
            )));
        }
    }
    Ok(TemplateCatalog::new(templates))
}

/// Handle to the running services.
pub struct RunningControlPlane {
    pub gateway_addr: SocketAddr,
    pub endpoint_gateway_addr: SocketAddr,
    pub metrics_gateway_addr: SocketAddr,
    pub line_addr: Option<SocketAddr>,
    pub callback_url: String,
    pub internal_token: String,
    pub store: Arc<dyn StateStore>,
    pub metrics: Arc<ControlPlaneMetrics>,
    pub sim: Option<RealtimeSimBackend>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningControlPlane {
    /// Stops the loops, drains the HTTP servers and waits for all of it.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks.drain(..) {
            if !t.is_finished() {
                t.abort();
            }
            let _ = t.await;
        }
    }
}

impl Drop for RunningControlPlane {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}
