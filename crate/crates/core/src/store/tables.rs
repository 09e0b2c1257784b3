use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::clock::Timestamp;
use crate::model::{
    AuthId, ConfigurationId, Endpoint, EndpointId, EndpointJob, EndpointJobId, JobState,
    ModelConfiguration, Tenant, TenantAuthentication, TenantId, MIN_ENDPOINT_PORT,
};

/// The full relational state. Every mutation goes through [`WriteOp`] so
/// that the same checks run for live transactions and for log replay.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tables {
    pub next_id: u64,
    pub tenants: BTreeMap<TenantId, Tenant>,
    pub authentications: BTreeMap<AuthId, TenantAuthentication>,
    pub configurations: BTreeMap<ConfigurationId, ModelConfiguration>,
    pub jobs: BTreeMap<EndpointJobId, EndpointJob>,
    pub endpoints: BTreeMap<EndpointId, Endpoint>,
}

/// A committed mutation, as written to the durable log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WriteOp {
    ReserveIds { next_id: u64 },
    InsertTenant(Tenant),
    InsertAuthentication(TenantAuthentication),
    RevokeAuthentication { id: AuthId, at: Timestamp },
    InsertConfiguration(ModelConfiguration),
    UpdateConfiguration(ModelConfiguration),
    InsertJob(EndpointJob),
    UpdateJob(EndpointJob),
    DeleteJob { id: EndpointJobId },
    InsertEndpoint(Endpoint),
    UpdateEndpoint(Endpoint),
    DeleteEndpoint { id: EndpointId },
}

/// Prior value of one row (or the id counter), restored on rollback.
#[derive(Debug)]
pub(crate) enum Undo {
    NextId(u64),
    Tenant(TenantId, Option<Tenant>),
    Authentication(AuthId, Option<TenantAuthentication>),
    Configuration(ConfigurationId, Option<ModelConfiguration>),
    Job(EndpointJobId, Option<EndpointJob>),
    Endpoint(EndpointId, Option<Endpoint>),
}

fn restore<K: Ord, V>(map: &mut BTreeMap<K, V>, key: K, prior: Option<V>) {
    match prior {
        Some(v) => {
            map.insert(key, v);
        }
        None => {
            map.remove(&key);
        }
    }
}

fn invariant(msg: impl Into<String>) -> StoreError {
    StoreError::InvariantViolation(msg.into())
}

impl Tables {
    pub(crate) fn undo(&mut self, undo: Undo) {
        match undo {
            Undo::NextId(v) => self.next_id = v,
            Undo::Tenant(k, v) => restore(&mut self.tenants, k, v),
            Undo::Authentication(k, v) => restore(&mut self.authentications, k, v),
            Undo::Configuration(k, v) => restore(&mut self.configurations, k, v),
            Undo::Job(k, v) => restore(&mut self.jobs, k, v),
            Undo::Endpoint(k, v) => restore(&mut self.endpoints, k, v),
        }
    }

    /// Validates and applies one op, returning what is needed to undo it.
    /// On error nothing has been changed.
    pub(crate) fn apply(&mut self, op: &WriteOp) -> Result<Vec<Undo>, StoreError> {
        match op {
            WriteOp::ReserveIds { next_id } => {
                if *next_id < self.next_id {
                    return Err(invariant("id counter may not move backwards"));
                }
                let prior = std::mem::replace(&mut self.next_id, *next_id);
                Ok(vec![Undo::NextId(prior)])
            }
            WriteOp::InsertTenant(t) => {
                if self.tenants.contains_key(&t.id) {
                    return Err(StoreError::Conflict(format!("tenant {} exists", t.id)));
                }
                self.tenants.insert(t.id, t.clone());
                Ok(vec![Undo::Tenant(t.id, None)])
            }
            WriteOp::InsertAuthentication(a) => {
                if !self.tenants.contains_key(&a.tenant_id) {
                    return Err(StoreError::ReferentialViolation(format!(
                        "authentication references missing tenant {}",
                        a.tenant_id
                    )));
                }
                if self.authentications.contains_key(&a.id) {
                    return Err(StoreError::Conflict(format!("authentication {} exists", a.id)));
                }
                if self
                    .authentications
                    .values()
                    .any(|other| other.key_digest == a.key_digest)
                {
                    return Err(StoreError::Conflict("key digest already registered".into()));
                }
                self.authentications.insert(a.id, a.clone());
                Ok(vec![Undo::Authentication(a.id, None)])
            }
            WriteOp::RevokeAuthentication { id, at } => {
                let row = self
                    .authentications
                    .get_mut(id)
                    .ok_or_else(|| StoreError::NotFound(format!("authentication {id}")))?;
                let prior = row.clone();
                row.revoked_at.get_or_insert(*at);
                Ok(vec![Undo::Authentication(*id, Some(prior))])
            }
            WriteOp::InsertConfiguration(c) | WriteOp::UpdateConfiguration(c) => {
                let exists = self.configurations.contains_key(&c.id);
                match (op, exists) {
                    (WriteOp::InsertConfiguration(_), true) => {
                        return Err(StoreError::Conflict(format!("configuration {} exists", c.id)))
                    }
                    (WriteOp::UpdateConfiguration(_), false) => {
                        return Err(StoreError::NotFound(format!("configuration {}", c.id)))
                    }
                    _ => {}
                }
                c.check_invariants().map_err(invariant)?;
                if c.enabled
                    && self
                        .configurations
                        .values()
                        .any(|o| o.id != c.id && o.enabled && o.model_name == c.model_name)
                {
                    return Err(StoreError::Conflict(format!(
                        "model_name {:?} already used by an enabled configuration",
                        c.model_name
                    )));
                }
                let prior = self.configurations.insert(c.id, c.clone());
                Ok(vec![Undo::Configuration(c.id, prior)])
            }
            WriteOp::InsertJob(j) | WriteOp::UpdateJob(j) => {
                let prior = self.jobs.get(&j.id).cloned();
                match (op, &prior) {
                    (WriteOp::InsertJob(_), Some(_)) => {
                        return Err(StoreError::Conflict(format!("endpoint job {} exists", j.id)))
                    }
                    (WriteOp::UpdateJob(_), None) => {
                        return Err(StoreError::NotFound(format!("endpoint job {}", j.id)))
                    }
                    _ => {}
                }
                if let Some(p) = &prior {
                    if p.configuration_id != j.configuration_id {
                        return Err(invariant("a job cannot move between configurations"));
                    }
                }
                if !self.configurations.contains_key(&j.configuration_id) {
                    return Err(StoreError::ReferentialViolation(format!(
                        "endpoint job references missing configuration {}",
                        j.configuration_id
                    )));
                }
                j.check_invariants().map_err(invariant)?;
                if j.state.is_live()
                    && self.jobs.values().any(|o| {
                        o.id != j.id && o.state.is_live() && o.scheduler_job_id == j.scheduler_job_id
                    })
                {
                    return Err(StoreError::Conflict(format!(
                        "scheduler job id {:?} already tracked",
                        j.scheduler_job_id
                    )));
                }
                self.jobs.insert(j.id, j.clone());
                Ok(vec![Undo::Job(j.id, prior)])
            }
            WriteOp::DeleteJob { id } => {
                let prior = self
                    .jobs
                    .remove(id)
                    .ok_or_else(|| StoreError::NotFound(format!("endpoint job {id}")))?;
                let mut undo = vec![Undo::Job(*id, Some(prior))];
                let attached: Vec<EndpointId> = self
                    .endpoints
                    .values()
                    .filter(|e| e.endpoint_job_id == *id)
                    .map(|e| e.id)
                    .collect();
                for eid in attached {
                    let row = self.endpoints.remove(&eid);
                    undo.push(Undo::Endpoint(eid, row));
                }
                Ok(undo)
            }
            WriteOp::InsertEndpoint(e) | WriteOp::UpdateEndpoint(e) => {
                let prior = self.endpoints.get(&e.id).cloned();
                match (op, &prior) {
                    (WriteOp::InsertEndpoint(_), Some(_)) => {
                        return Err(StoreError::Conflict(format!("endpoint {} exists", e.id)))
                    }
                    (WriteOp::UpdateEndpoint(_), None) => {
                        return Err(StoreError::NotFound(format!("endpoint {}", e.id)))
                    }
                    _ => {}
                }
                if !self.jobs.contains_key(&e.endpoint_job_id) {
                    return Err(StoreError::ReferentialViolation(format!(
                        "endpoint references missing job {}",
                        e.endpoint_job_id
                    )));
                }
                if e.port < MIN_ENDPOINT_PORT {
                    return Err(invariant(format!("port {} outside [1024, 65535]", e.port)));
                }
                for other in self.endpoints.values().filter(|o| o.id != e.id) {
                    if other.endpoint_job_id == e.endpoint_job_id {
                        return Err(StoreError::Conflict(format!(
                            "job {} already has an endpoint",
                            e.endpoint_job_id
                        )));
                    }
                    if other.node_id == e.node_id && other.port == e.port {
                        return Err(StoreError::Conflict(format!(
                            "{}:{} already taken",
                            e.node_id, e.port
                        )));
                    }
                }
                self.endpoints.insert(e.id, e.clone());
                Ok(vec![Undo::Endpoint(e.id, prior)])
            }
            WriteOp::DeleteEndpoint { id } => {
                let prior = self
                    .endpoints
                    .remove(id)
                    .ok_or_else(|| StoreError::NotFound(format!("endpoint {id}")))?;
                Ok(vec![Undo::Endpoint(*id, Some(prior))])
            }
        }
    }

    /// Cross-row consistency, for tests and for loading a log.
    pub fn check_integrity(&self) -> Result<(), StoreError> {
        for a in self.authentications.values() {
            if !self.tenants.contains_key(&a.tenant_id) {
                return Err(StoreError::ReferentialViolation(format!("auth {}", a.id)));
            }
        }
        for j in self.jobs.values() {
            if !self.configurations.contains_key(&j.configuration_id) {
                return Err(StoreError::ReferentialViolation(format!("job {}", j.id)));
            }
            j.check_invariants().map_err(invariant)?;
        }
        for e in self.endpoints.values() {
            if !self.jobs.contains_key(&e.endpoint_job_id) {
                return Err(StoreError::ReferentialViolation(format!("endpoint {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn live_job_count(&self, configuration_id: ConfigurationId) -> usize {
        self.jobs
            .values()
            .filter(|j| j.configuration_id == configuration_id)
            .filter(|j| matches!(j.state, JobState::Submitted | JobState::Registered | JobState::Ready))
            .count()
    }
}
