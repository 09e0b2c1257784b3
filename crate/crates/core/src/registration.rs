//! The endpoint gateway's registration logic: a starting job announces
//! itself, receives a port, and gets an endpoint row.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::auth::{bearer_token, CallbackTokens};
use crate::clock::Timestamp;
use crate::model::{Endpoint, EndpointId, EndpointJobId, JobState};
use crate::store::{StateStore, StoreError, StoreExt, Transaction};
use crate::telemetry::ControlPlaneMetrics;

pub const DEFAULT_BASE_PORT: u16 = 8000;
const MAX_ATTEMPTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRequest {
    #[serde(deserialize_with = "id_from_string_or_number")]
    pub endpoint_job_id: EndpointJobId,
    pub scheduler_job_id: String,
    pub node_id: String,
    pub model_version: String,
    pub capabilities: BTreeSet<String>,
    pub bearer_token: String,
}

fn id_from_string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<EndpointJobId, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(u64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Number(n) => Ok(EndpointJobId(n)),
        Raw::Text(s) => s.trim().parse().map_err(serde::de::Error::custom),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationResponse {
    pub assigned_port: u16,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("invalid callback token")]
    Unauthorized,
    #[error("unknown endpoint job {0}")]
    UnknownJob(EndpointJobId),
    #[error("endpoint job {0} is already registered")]
    AlreadyRegistered(EndpointJobId),
    #[error("invalid registration: {0}")]
    Invalid(String),
    #[error("no free port left on node {0:?}")]
    PortRangeExhausted(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// `base_port` when the node has no endpoints, otherwise one above the
/// highest port in use there. Freed ports below the maximum are not reused.
pub fn allocate_port(tx: &Transaction<'_>, node_id: &str, base_port: u16) -> Result<u16, RegistrationError> {
    match tx.endpoints_on_node(node_id).map(|e| e.port).max() {
        None => Ok(base_port),
        Some(u16::MAX) => Err(RegistrationError::PortRangeExhausted(node_id.to_string())),
        Some(max) => Ok(max + 1),
    }
}

pub struct Registrar {
    store: Arc<dyn StateStore>,
    tokens: CallbackTokens,
    base_port: u16,
    metrics: Arc<ControlPlaneMetrics>,
}

impl Registrar {
    pub fn new(store: Arc<dyn StateStore>, tokens: CallbackTokens, base_port: u16, metrics: Arc<ControlPlaneMetrics>) -> Self {
        Self {
            store,
            tokens,
            base_port,
            metrics,
        }
    }

    /// Registers the job behind `request`. `authorization` is the raw
    /// `Authorization` header, which must carry the job's callback token.
    pub fn register(
        &self,
        request: &RegistrationRequest,
        authorization: Option<&str>,
        now: Timestamp,
    ) -> Result<RegistrationResponse, RegistrationError> {
        let token = bearer_token(authorization).ok_or(RegistrationError::Unauthorized)?;
        if !self.tokens.verify(request.endpoint_job_id, token) {
            return Err(RegistrationError::Unauthorized);
        }
        for (field, value) in [
            ("node_id", &request.node_id),
            ("model_version", &request.model_version),
            ("bearer_token", &request.bearer_token),
        ] {
            if value.trim().is_empty() {
                return Err(RegistrationError::Invalid(format!("{field} is empty")));
            }
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.store.transact(|tx| self.register_in(tx, request, now)) {
                Err(RegistrationError::Store(StoreError::Conflict(msg))) if attempt < MAX_ATTEMPTS => {
                    tracing::debug!(attempt, conflict = %msg, "retrying registration");
                }
                Ok(port) => {
                    self.metrics.registrations.inc();
                    tracing::info!(
                        action = "register",
                        endpoint_job_id = %request.endpoint_job_id,
                        node = %request.node_id,
                        port,
                    );
                    return Ok(RegistrationResponse { assigned_port: port });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn register_in(
        &self,
        tx: &mut Transaction<'_>,
        request: &RegistrationRequest,
        now: Timestamp,
    ) -> Result<u16, RegistrationError> {
        let id = request.endpoint_job_id;
        let job = match tx.job(id) {
            Some(j) if j.state.is_live() => j.clone(),
            _ => return Err(RegistrationError::UnknownJob(id)),
        };
        if job.state != JobState::Submitted || tx.endpoint_for_job(id).is_some() {
            return Err(RegistrationError::AlreadyRegistered(id));
        }
        let model_name = tx
            .configuration(job.configuration_id)
            .map(|c| c.model_name.clone())
            .ok_or(StoreError::UnknownConfiguration(job.configuration_id))?;
        let port = allocate_port(tx, &request.node_id, self.base_port)?;
        let endpoint_id = EndpointId(tx.allocate_id()?);
        let mut job = job;
        job.registered_at = Some(now.max(job.submitted_at));
        job.state = JobState::Registered;
        tx.update_job(job)?;
        tx.insert_endpoint(Endpoint {
            id: endpoint_id,
            endpoint_job_id: id,
            node_id: request.node_id.clone(),
            port,
            model_name,
            capabilities: request.capabilities.clone(),
            bearer_token: request.bearer_token.clone(),
            ready_at: None,
        })?;
        Ok(port)
    }
}
