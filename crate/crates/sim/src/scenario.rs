//! Scenario files: the node pool, the models to serve with their mock
//! server behaviour, control-loop intervals, alert rules and client load.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use llmscale_core::health::DEFAULT_SWEEP_INTERVAL;
use llmscale_core::jobs::DEFAULT_RECONCILE_INTERVAL;
use llmscale_core::model::{DEFAULT_POST_SUBMIT_WAIT, DEFAULT_STARTUP_TIMEOUT};
use llmscale_core::registration::DEFAULT_BASE_PORT;
use llmscale_core::scaling::{AlertRule, DEFAULT_SCRAPE_INTERVAL};
use llmscale_core::{ConfigurationId, ModelConfiguration};
use serde::{Deserialize, Serialize};

use crate::clock::ClockMode;
use crate::error::SimError;
use crate::profile::MockServerProfile;
use crate::scheduler::NodeSpec;

/// Template used for every model in a simulation. Nothing executes it; the
/// sim scheduler only reads the generated `LLMSCALE_*` exports.
pub const SIM_TEMPLATE: &str = "#!/bin/bash\n\
#SBATCH --job-name=llmscale-sim\n\
#SBATCH --nodes=1\n\
exec vllm serve \"$LLMSCALE_MODEL_VERSION\" --served-model-name {{model_name}} --port \"$LLMSCALE_PORT\" --api-key \"$LLMSCALE_BEARER_TOKEN\"\n";

fn yes() -> bool {
    true
}

fn default_nodes() -> Vec<NodeSpec> {
    vec![NodeSpec {
        name: "node-1".into(),
        capacity: 8,
    }]
}

fn default_base_port() -> u16 {
    DEFAULT_BASE_PORT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intervals {
    #[serde(with = "humantime_serde")]
    pub reconcile: Duration,
    #[serde(with = "humantime_serde")]
    pub sweep: Duration,
    #[serde(with = "humantime_serde")]
    pub scrape: Duration,
    /// How long a client waits before retrying a failed send.
    #[serde(with = "humantime_serde")]
    pub client_retry: Duration,
}

impl Default for Intervals {
    fn default() -> Self {
        Self {
            reconcile: DEFAULT_RECONCILE_INTERVAL,
            sweep: DEFAULT_SWEEP_INTERVAL,
            scrape: DEFAULT_SCRAPE_INTERVAL,
            client_retry: Duration::from_secs(1),
        }
    }
}

fn default_template() -> String {
    "vllm".into()
}

fn default_capabilities() -> BTreeSet<String> {
    BTreeSet::from(["chat".to_string(), "completions".to_string()])
}

fn default_desired() -> u32 {
    1
}

fn default_max() -> u32 {
    4
}

fn default_startup_timeout() -> Duration {
    DEFAULT_STARTUP_TIMEOUT
}

fn default_post_submit_wait() -> Duration {
    DEFAULT_POST_SUBMIT_WAIT
}

fn default_startup_delay() -> Duration {
    Duration::from_secs(60)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub version: Option<String>,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_capabilities")]
    pub capabilities: BTreeSet<String>,
    #[serde(default)]
    pub min_instances: u32,
    #[serde(default = "default_desired")]
    pub desired_instances: u32,
    #[serde(default = "default_max")]
    pub max_instances: u32,
    #[serde(default = "default_startup_timeout", with = "humantime_serde")]
    pub startup_timeout: Duration,
    #[serde(default = "default_post_submit_wait", with = "humantime_serde")]
    pub post_submit_wait: Duration,
    /// From the job getting a node to its registration callback.
    #[serde(default = "default_startup_delay", with = "humantime_serde")]
    pub startup_delay: Duration,
    /// From registration until `/health` answers 200.
    #[serde(default, with = "humantime_serde")]
    pub load_delay: Duration,
    /// The server registers but never becomes healthy.
    #[serde(default)]
    pub never_healthy: bool,
    #[serde(default)]
    pub profile: MockServerProfile,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: None,
            template: default_template(),
            capabilities: default_capabilities(),
            min_instances: 0,
            desired_instances: default_desired(),
            max_instances: default_max(),
            startup_timeout: default_startup_timeout(),
            post_submit_wait: default_post_submit_wait(),
            startup_delay: default_startup_delay(),
            load_delay: Duration::ZERO,
            never_healthy: false,
            profile: MockServerProfile::default(),
        }
    }

    pub fn configuration(&self, id: ConfigurationId) -> ModelConfiguration {
        let mut c = ModelConfiguration::new(id, &self.name, &self.template).with_instances(
            self.min_instances,
            self.desired_instances,
            self.max_instances,
        );
        if let Some(v) = &self.version {
            c.model_version = v.clone();
        }
        c.capabilities = self.capabilities.clone();
        c.startup_timeout = self.startup_timeout;
        c.post_submit_wait = self.post_submit_wait;
        c
    }
}

/// Closed-loop clients: `concurrency` of them, each sending its next request
/// as soon as the previous one finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub model: String,
    pub concurrency: u32,
    /// Total requests to issue; unlimited when absent.
    #[serde(default)]
    pub requests: Option<u64>,
    #[serde(default, with = "humantime_serde")]
    pub start_at: Duration,
    #[serde(default, with = "humantime_serde")]
    pub stop_at: Option<Duration>,
    #[serde(default)]
    pub max_tokens: Option<u64>,
    #[serde(default)]
    pub ignore_eos: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock: ClockMode,
    /// Simulated wall-clock start, in milliseconds since the epoch.
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default = "default_nodes")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default = "yes")]
    pub queue_when_full: bool,
    #[serde(default = "default_base_port")]
    pub base_port: u16,
    #[serde(default)]
    pub intervals: Intervals,
    pub models: Vec<ModelSpec>,
    #[serde(default = "AlertRule::defaults")]
    pub rules: Vec<AlertRule>,
    #[serde(default)]
    pub load: Vec<LoadSpec>,
}

impl Scenario {
    pub fn new(models: Vec<ModelSpec>) -> Self {
        Self {
            seed: 0,
            clock: ClockMode::Manual,
            start_ms: 0,
            nodes: default_nodes(),
            queue_when_full: true,
            base_port: DEFAULT_BASE_PORT,
            intervals: Intervals::default(),
            models,
            rules: AlertRule::defaults(),
            load: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Configurations with ids 1, 2, ... in model order.
    pub fn configurations(&self) -> Vec<ModelConfiguration> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| m.configuration(ConfigurationId(i as u64 + 1)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.nodes.is_empty() || self.nodes.iter().any(|n| n.capacity == 0 || n.name.is_empty()) {
            return bad("nodes must be non-empty, named, with capacity >= 1".into());
        }
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(&n.name) {
                return bad(format!("duplicate node {:?}", n.name));
            }
        }
        let i = &self.intervals;
        if [i.reconcile, i.sweep, i.scrape, i.client_retry].iter().any(Duration::is_zero) {
            return bad("intervals must be positive".into());
        }
        let mut models = BTreeSet::new();
        for (idx, m) in self.models.iter().enumerate() {
            if !models.insert(&m.name) {
                return bad(format!("duplicate model {:?}", m.name));
            }
            m.profile
                .validate()
                .map_err(|e| SimError::Scenario(format!("model {:?}: {e}", m.name)))?;
            m.configuration(ConfigurationId(idx as u64 + 1))
                .check_invariants()
                .map_err(|e| SimError::Scenario(format!("model {:?}: {e}", m.name)))?;
        }
        for r in &self.rules {
            r.validate().map_err(SimError::Scenario)?;
        }
        for l in &self.load {
            if !models.contains(&l.model) {
                return bad(format!("load targets unknown model {:?}", l.model));
            }
            if l.concurrency == 0 {
                return bad("load concurrency must be at least 1".into());
            }
        }
        Ok(())
    }
}
