//! Service configuration: a TOML file plus `LLMSCALE_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use llmscale_core::auth::DEFAULT_AUTH_CACHE_TTL;
use llmscale_core::health::{DEFAULT_PROBE_CONCURRENCY, DEFAULT_PROBE_TIMEOUT, DEFAULT_SWEEP_INTERVAL};
use llmscale_core::jobs::DEFAULT_RECONCILE_INTERVAL;
use llmscale_core::registration::DEFAULT_BASE_PORT;
use llmscale_core::scaling::{AlertRule, DEFAULT_SCRAPE_INTERVAL};
use llmscale_sim::{ModelSpec, NodeSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid value for {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    #[serde(with = "humantime_serde")]
    pub auth_cache_ttl: Duration,
    /// Connect timeout for upstream inference servers.
    #[serde(with = "humantime_serde")]
    pub connect_timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: ([0, 0, 0, 0], 8080).into(),
            auth_cache_ttl: DEFAULT_AUTH_CACHE_TTL,
            connect_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointGatewayConfig {
    pub listen: SocketAddr,
    pub base_port: u16,
    /// URL jobs post their registration to. Derived from `listen` when unset.
    pub callback_url: Option<String>,
}

impl Default for EndpointGatewayConfig {
    fn default() -> Self {
        Self {
            listen: ([0, 0, 0, 0], 8081).into(),
            base_port: DEFAULT_BASE_PORT,
            callback_url: None,
        }
    }
}

impl EndpointGatewayConfig {
    pub fn effective_callback_url(&self, bound: SocketAddr) -> String {
        if let Some(url) = &self.callback_url {
            return url.clone();
        }
        let host = if bound.ip().is_unspecified() {
            "127.0.0.1".to_string()
        } else {
            bound.ip().to_string()
        };
        format!("http://{host}:{}/internal/endpoints/register", bound.port())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsGatewayConfig {
    pub listen: SocketAddr,
    #[serde(with = "humantime_serde")]
    pub scrape_interval: Duration,
    #[serde(with = "humantime_serde")]
    pub scrape_timeout: Duration,
    pub rules: Vec<AlertRule>,
}

impl Default for MetricsGatewayConfig {
    fn default() -> Self {
        Self {
            listen: ([0, 0, 0, 0], 8082).into(),
            scrape_interval: DEFAULT_SCRAPE_INTERVAL,
            scrape_timeout: Duration::from_secs(2),
            rules: AlertRule::defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobWorkerConfig {
    #[serde(with = "humantime_serde")]
    pub reconcile_interval: Duration,
}

impl Default for JobWorkerConfig {
    fn default() -> Self {
        Self {
            reconcile_interval: DEFAULT_RECONCILE_INTERVAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointWorkerConfig {
    #[serde(with = "humantime_serde")]
    pub sweep_interval: Duration,
    #[serde(with = "humantime_serde")]
    pub probe_timeout: Duration,
    pub probe_concurrency: usize,
}

impl Default for EndpointWorkerConfig {
    fn default() -> Self {
        Self {
            sweep_interval: DEFAULT_SWEEP_INTERVAL,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            probe_concurrency: DEFAULT_PROBE_CONCURRENCY,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sim,
    Command,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Self::Sim),
            "command" => Ok(Self::Command),
            other => Err(format!("expected `sim` or `command`, got {other:?}")),
        }
    }
}

fn default_sim_nodes() -> Vec<NodeSpec> {
    vec![NodeSpec {
        name: "127.0.0.1".into(),
        capacity: 8,
    }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub backend: BackendKind,
    /// Submit command; the rendered script arrives on stdin.
    pub command: Vec<String>,
    pub cancel_command: Vec<String>,
    pub templates_dir: PathBuf,
    /// Optional TCP listener for the line-oriented submit protocol.
    pub line_listen: Option<SocketAddr>,
    /// Seeds bearer-token generation for submitted jobs.
    pub seed: Option<u64>,
    /// Sim backend only: the node pool. Node names are bind addresses.
    pub sim_nodes: Vec<NodeSpec>,
    pub sim_queue_when_full: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Sim,
            command: vec!["sbatch".into()],
            cancel_command: vec!["scancel".into()],
            templates_dir: PathBuf::from("templates"),
            line_listen: None,
            seed: None,
            sim_nodes: default_sim_nodes(),
            sim_queue_when_full: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// File-backed store; in-memory when unset.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecretsConfig {
    /// Keys the API-key digest. Must stay stable for a file-backed store.
    pub key_secret: Option<String>,
    /// Derives per-job registration tokens.
    pub callback_secret: Option<String>,
    /// Bearer token for the scale webhook.
    pub internal_token: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub gateway: GatewayConfig,
    pub endpoint_gateway: EndpointGatewayConfig,
    pub metrics_gateway: MetricsGatewayConfig,
    pub job_worker: JobWorkerConfig,
    pub endpoint_worker: EndpointWorkerConfig,
    pub scheduler: SchedulerConfig,
    pub store: StoreConfig,
    pub secrets: SecretsConfig,
    /// Model configurations created at startup when no enabled
    /// configuration of that name exists. Mock-server fields apply only to
    /// the sim backend.
    pub models: Vec<ModelSpec>,
}

fn parse_env<T>(var: &str, value: &str, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
    parse(value).map_err(|message| ConfigError::Env {
        var: var.to_string(),
        message,
    })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => Config::default(),
        };
        c.apply_env(|k| std::env::var(k).ok())?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `LLMSCALE_*` overrides looked up through `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let addr = |s: &str| s.parse::<SocketAddr>().map_err(|e| e.to_string());
        let duration = |s: &str| humantime_serde::re::humantime::parse_duration(s).map_err(|e| e.to_string());
        if let Some(v) = env("LLMSCALE_LISTEN") {
            self.gateway.listen = parse_env("LLMSCALE_LISTEN", &v, addr)?;
        }
        if let Some(v) = env("LLMSCALE_AUTH_CACHE_TTL") {
            self.gateway.auth_cache_ttl = parse_env("LLMSCALE_AUTH_CACHE_TTL", &v, duration)?;
        }
        if let Some(v) = env("LLMSCALE_STORE_PATH") {
            self.store.path = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        if let Some(v) = env("LLMSCALE_ENDPOINT_GATEWAY_LISTEN") {
            self.endpoint_gateway.listen = parse_env("LLMSCALE_ENDPOINT_GATEWAY_LISTEN", &v, addr)?;
        }
        if let Some(v) = env("LLMSCALE_CALLBACK_URL") {
            self.endpoint_gateway.callback_url = Some(v);
        }
        if let Some(v) = env("LLMSCALE_METRICS_GATEWAY_LISTEN") {
            self.metrics_gateway.listen = parse_env("LLMSCALE_METRICS_GATEWAY_LISTEN", &v, addr)?;
        }
        if let Some(v) = env("LLMSCALE_SCHEDULER_BACKEND") {
            self.scheduler.backend = parse_env("LLMSCALE_SCHEDULER_BACKEND", &v, str::parse)?;
        }
        if let Some(v) = env("LLMSCALE_SCHEDULER_COMMAND") {
            self.scheduler.command = v.split_whitespace().map(str::to_string).collect();
        }
        if let Some(v) = env("LLMSCALE_TEMPLATES_DIR") {
            self.scheduler.templates_dir = PathBuf::from(v);
        }
        if let Some(v) = env("LLMSCALE_KEY_SECRET") {
            self.secrets.key_secret = Some(v);
        }
        if let Some(v) = env("LLMSCALE_CALLBACK_SECRET") {
            self.secrets.callback_secret = Some(v);
        }
        if let Some(v) = env("LLMSCALE_INTERNAL_TOKEN") {
            self.secrets.internal_token = Some(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.gateway.auth_cache_ttl.is_zero() {
            return bad("gateway.auth_cache_ttl must be positive");
        }
        if [
            self.job_worker.reconcile_interval,
            self.endpoint_worker.sweep_interval,
            self.endpoint_worker.probe_timeout,
            self.metrics_gateway.scrape_interval,
        ]
        .iter()
        .any(Duration::is_zero)
        {
            return bad("intervals and timeouts must be positive");
        }
        if self.scheduler.backend == BackendKind::Command && self.scheduler.command.is_empty() {
            return bad("scheduler.command is required for the command backend");
        }
        if self.scheduler.backend == BackendKind::Sim && self.scheduler.sim_nodes.iter().any(|n| n.capacity == 0) {
            return bad("scheduler.sim_nodes need capacity >= 1");
        }
        if self.store.path.is_some() && self.secrets.key_secret.as_deref().unwrap_or("").is_empty() {
            return bad("secrets.key_secret is required with a file-backed store");
        }
        for rule in &self.metrics_gateway.rules {
            rule.validate().map_err(ConfigError::Invalid)?;
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !names.insert(&m.name) {
                return Err(ConfigError::Invalid(format!("model {:?} listed twice", m.name)));
            }
            m.configuration(llmscale_core::ConfigurationId(0))
                .check_invariants()
                .map_err(|e| ConfigError::Invalid(format!("model {:?}: {e}", m.name)))?;
        }
        Ok(())
    }
}
