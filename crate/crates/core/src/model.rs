//! Rows of the shared state store.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clock::Timestamp;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = std::num::ParseIntError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }
    };
}

id_type!(TenantId);
id_type!(AuthId);
id_type!(ConfigurationId);
id_type!(
    /// Internal id of an endpoint job; echoed back by the job's registration callback.
    EndpointJobId
);
id_type!(EndpointId);

/// Keyed one-way digest of an API key. Fixed length; never the plaintext.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyDigest(pub [u8; 32]);

impl fmt::Debug for KeyDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyDigest({}…)", &hex::encode(self.0)[..8])
    }
}

impl Serialize for KeyDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for KeyDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(KeyDigest(out))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tenant {
    pub id: TenantId,
    pub name: String,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantAuthentication {
    pub id: AuthId,
    pub tenant_id: TenantId,
    pub key_digest: KeyDigest,
    pub label: String,
    pub created_at: Timestamp,
    pub revoked_at: Option<Timestamp>,
}

impl TenantAuthentication {
    pub fn is_revoked(&self) -> bool {
        self.revoked_at.is_some()
    }
}

pub const DEFAULT_STARTUP_TIMEOUT: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_POST_SUBMIT_WAIT: Duration = Duration::from_secs(10);

/// Desired state for one served model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfiguration {
    pub id: ConfigurationId,
    /// Public identifier clients put in the `model` field.
    pub model_name: String,
    /// Weights revision handed to the job; defaults to `model_name`.
    pub model_version: String,
    pub template_name: String,
    pub capabilities: BTreeSet<String>,
    pub desired_instances: u32,
    pub min_instances: u32,
    pub max_instances: u32,
    pub startup_timeout: Duration,
    pub post_submit_wait: Duration,
    pub enabled: bool,
}

impl ModelConfiguration {
    /// A configuration with one instance and default timings.
    pub fn new(id: ConfigurationId, model_name: impl Into<String>, template_name: impl Into<String>) -> Self {
        let model_name = model_name.into();
        Self {
            id,
            model_version: model_name.clone(),
            model_name,
            template_name: template_name.into(),
            capabilities: BTreeSet::from(["chat".to_string(), "completions".to_string()]),
            desired_instances: 1,
            min_instances: 0,
            max_instances: 4,
            startup_timeout: DEFAULT_STARTUP_TIMEOUT,
            post_submit_wait: DEFAULT_POST_SUBMIT_WAIT,
            enabled: true,
        }
    }

    pub fn with_instances(mut self, min: u32, desired: u32, max: u32) -> Self {
        self.min_instances = min;
        self.desired_instances = desired;
        self.max_instances = max;
        self
    }

    /// `desired_instances` clamped into `[min_instances, max_instances]`.
    pub fn target_instances(&self) -> u32 {
        self.desired_instances
            .clamp(self.min_instances, self.max_instances.max(self.min_instances))
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.model_name.is_empty() {
            return Err("model_name must not be empty".into());
        }
        if self.max_instances == 0 {
            return Err("max_instances must be positive".into());
        }
        if !(self.min_instances <= self.desired_instances
            && self.desired_instances <= self.max_instances)
        {
            return Err(format!(
                "instances must satisfy min <= desired <= max, got {} <= {} <= {}",
                self.min_instances, self.desired_instances, self.max_instances
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Submitted,
    Registered,
    Ready,
    Expired,
}

impl JobState {
    pub fn is_live(self) -> bool {
        !matches!(self, JobState::Expired)
    }
}

/// A batch job expected to host one inference server.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointJob {
    pub id: EndpointJobId,
    pub configuration_id: ConfigurationId,
    pub scheduler_job_id: String,
    pub submitted_at: Timestamp,
    pub registered_at: Option<Timestamp>,
    pub ready_at: Option<Timestamp>,
    pub state: JobState,
}

impl EndpointJob {
    pub fn submitted(
        id: EndpointJobId,
        configuration_id: ConfigurationId,
        scheduler_job_id: impl Into<String>,
        at: Timestamp,
    ) -> Self {
        Self {
            id,
            configuration_id,
            scheduler_job_id: scheduler_job_id.into(),
            submitted_at: at,
            registered_at: None,
            ready_at: None,
            state: JobState::Submitted,
        }
    }

    /// The state implied by which timestamps are set.
    pub fn state_from_timestamps(&self) -> JobState {
        match (self.registered_at, self.ready_at) {
            (_, Some(_)) => JobState::Ready,
            (Some(_), None) => JobState::Registered,
            (None, None) => JobState::Submitted,
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(reg) = self.registered_at {
            if reg < self.submitted_at {
                return Err("registered_at precedes submitted_at".into());
            }
        }
        if let Some(ready) = self.ready_at {
            let floor = self.registered_at.unwrap_or(self.submitted_at);
            if ready < floor {
                return Err("ready_at precedes registration".into());
            }
        }
        if self.state != JobState::Expired && self.state != self.state_from_timestamps() {
            return Err(format!(
                "state {:?} disagrees with timestamps ({:?})",
                self.state,
                self.state_from_timestamps()
            ));
        }
        Ok(())
    }
}

/// A network-addressable inference server.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: EndpointId,
    pub endpoint_job_id: EndpointJobId,
    pub node_id: String,
    pub port: u16,
    pub model_name: String,
    pub capabilities: BTreeSet<String>,
    pub bearer_token: String,
    pub ready_at: Option<Timestamp>,
}

pub const MIN_ENDPOINT_PORT: u16 = 1024;

impl Endpoint {
    /// `node:port`, the form used for discovery targets and upstream URLs.
    pub fn address(&self) -> String {
        format!("{}:{}", self.node_id, self.port)
    }

    pub fn is_ready(&self) -> bool {
        self.ready_at.is_some()
    }
}
