use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::bearer_token;
use crate::model::ModelConfiguration;
use crate::store::{StateStore, StoreError, StoreExt};
use crate::telemetry::ControlPlaneMetrics;

const REMEMBERED_FIRINGS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleDirection {
    #[serde(alias = "Up", alias = "UP")]
    Up,
    #[serde(alias = "Down", alias = "DOWN")]
    Down,
}

fn one() -> u32 {
    1
}

/// Body of `POST /internal/scale`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleCommand {
    pub model_name: String,
    pub direction: ScaleDirection,
    #[serde(default = "one")]
    pub magnitude: u32,
    /// Deliveries repeating an earlier id are acknowledged without effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firing_id: Option<String>,
    #[serde(default)]
    pub reason: String,
}

impl ScaleCommand {
    pub fn from_json(body: &[u8]) -> Result<Self, ScaleError> {
        let cmd: ScaleCommand =
            serde_json::from_slice(body).map_err(|e| ScaleError::MalformedPayload(e.to_string()))?;
        if cmd.model_name.is_empty() {
            return Err(ScaleError::MalformedPayload("model_name is empty".into()));
        }
        if cmd.magnitude == 0 {
            return Err(ScaleError::MalformedPayload("magnitude must be positive".into()));
        }
        Ok(cmd)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleOutcome {
    pub model_name: String,
    pub previous_desired: u32,
    pub desired_instances: u32,
    /// The requested change was cut short by `min_instances`/`max_instances`.
    pub clamped: bool,
    pub duplicate: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScaleError {
    #[error("invalid or missing internal token")]
    Unauthorized,
    #[error("no enabled configuration serves model {0:?}")]
    UnknownModel(String),
    #[error("malformed scale payload: {0}")]
    MalformedPayload(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Default)]
struct Seen {
    outcomes: HashMap<String, ScaleOutcome>,
    order: VecDeque<String>,
}

/// Applies scale commands to `desired_instances`, clamped to the
/// configuration's bounds.
pub struct ScaleController {
    store: Arc<dyn StateStore>,
    token: String,
    seen: Mutex<Seen>,
    metrics: Arc<ControlPlaneMetrics>,
}

impl ScaleController {
    pub fn new(store: Arc<dyn StateStore>, internal_token: impl Into<String>, metrics: Arc<ControlPlaneMetrics>) -> Self {
        Self {
            store,
            token: internal_token.into(),
            seen: Mutex::new(Seen::default()),
            metrics,
        }
    }

    pub fn authorize(&self, authorization: Option<&str>) -> Result<(), ScaleError> {
        match bearer_token(authorization) {
            Some(t) if !self.token.is_empty() && constant_time_eq(t.as_bytes(), self.token.as_bytes()) => Ok(()),
            _ => Err(ScaleError::Unauthorized),
        }
    }

    pub fn apply(&self, cmd: &ScaleCommand) -> Result<ScaleOutcome, ScaleError> {
        if cmd.magnitude == 0 {
            return Err(ScaleError::MalformedPayload("magnitude must be positive".into()));
        }
        let mut seen = self.seen.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(id) = &cmd.firing_id {
            if let Some(prior) = seen.outcomes.get(id) {
                return Ok(ScaleOutcome {
                    duplicate: true,
                    ..prior.clone()
                });
            }
        }
        let outcome = self.store.transact(|tx| {
            let config = tx
                .enabled_configuration_for(&cmd.model_name)
                .cloned()
                .ok_or_else(|| ScaleError::UnknownModel(cmd.model_name.clone()))?;
            let (desired, clamped) = scaled(&config, cmd.direction, cmd.magnitude);
            let previous = config.desired_instances;
            if desired != previous {
                tx.update_configuration(ModelConfiguration {
                    desired_instances: desired,
                    ..config
                })?;
            }
            Ok::<_, ScaleError>(ScaleOutcome {
                model_name: cmd.model_name.clone(),
                previous_desired: previous,
                desired_instances: desired,
                clamped,
                duplicate: false,
            })
        })?;
        if let Some(id) = &cmd.firing_id {
            seen.outcomes.insert(id.clone(), outcome.clone());
            seen.order.push_back(id.clone());
            if seen.order.len() > REMEMBERED_FIRINGS {
                if let Some(old) = seen.order.pop_front() {
                    seen.outcomes.remove(&old);
                }
            }
        }
        self.metrics.scale_firings.inc();
        tracing::info!(
            action = "scale",
            model = %cmd.model_name,
            direction = ?cmd.direction,
            magnitude = cmd.magnitude,
            previous = outcome.previous_desired,
            desired = outcome.desired_instances,
            clamped = outcome.clamped,
            reason = %cmd.reason,
        );
        Ok(outcome)
    }
}

fn scaled(config: &ModelConfiguration, direction: ScaleDirection, magnitude: u32) -> (u32, bool) {
    let current = config.desired_instances;
    let raw = match direction {
        ScaleDirection::Up => i64::from(current) + i64::from(magnitude),
        ScaleDirection::Down => i64::from(current) - i64::from(magnitude),
    };
    let bounded = raw.clamp(i64::from(config.min_instances), i64::from(config.max_instances));
    (bounded as u32, bounded != raw)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
