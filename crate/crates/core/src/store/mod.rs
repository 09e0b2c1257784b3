//! The single source of truth: tenants and their API keys, model
//! configurations, endpoint jobs and endpoints.
//!
//! All access goes through [`StateStore::run_transaction`]. Implementations
//! serialize transactions, so uniqueness checks made inside a transaction
//! (e.g. port allocation) hold against every concurrent writer.

mod file;
mod memory;
mod tables;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub use file::FileStore;
pub use memory::MemoryStore;
pub use tables::{Tables, WriteOp};

use crate::clock::Timestamp;
use crate::model::{
    AuthId, ConfigurationId, Endpoint, EndpointId, EndpointJob, EndpointJobId, KeyDigest,
    ModelConfiguration, Tenant, TenantAuthentication, TenantId,
};
use tables::Undo;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    /// A uniqueness invariant would be violated; the caller may retry.
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("referential integrity violation: {0}")]
    ReferentialViolation(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown configuration {0}")]
    UnknownConfiguration(ConfigurationId),
    #[error("store i/o error: {0}")]
    Io(String),
    #[error("corrupt store file: {0}")]
    Corrupt(String),
}

/// Returned by a transaction body to request rollback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rollback;

#[derive(Debug, Default)]
pub struct StoreStats {
    transactions: AtomicU64,
    authentication_lookups: AtomicU64,
    endpoint_queries: AtomicU64,
}

impl StoreStats {
    pub fn transactions(&self) -> u64 {
        self.transactions.load(Ordering::Relaxed)
    }

    /// Lookups of a tenant authentication row by key digest.
    pub fn authentication_lookups(&self) -> u64 {
        self.authentication_lookups.load(Ordering::Relaxed)
    }

    pub fn endpoint_queries(&self) -> u64 {
        self.endpoint_queries.load(Ordering::Relaxed)
    }
}

pub trait StateStore: Send + Sync {
    /// Runs `body` against a consistent view. If it returns `Ok`, its writes
    /// commit atomically; otherwise none of them are visible.
    fn run_transaction(
        &self,
        body: &mut dyn FnMut(&mut Transaction<'_>) -> Result<(), Rollback>,
    ) -> Result<(), StoreError>;

    fn stats(&self) -> &StoreStats;

    fn snapshot(&self) -> Tables;
}

/// Typed convenience layer over [`StateStore`].
pub trait StoreExt: StateStore {
    fn transact<T, E, F>(&self, f: F) -> Result<T, E>
    where
        E: From<StoreError>,
        F: FnOnce(&mut Transaction<'_>) -> Result<T, E>,
    {
        let mut f = Some(f);
        let mut result: Option<Result<T, E>> = None;
        self.run_transaction(&mut |tx| {
            let f = f.take().expect("transaction body runs once");
            let r = f(tx);
            let ok = r.is_ok();
            result = Some(r);
            if ok {
                Ok(())
            } else {
                Err(Rollback)
            }
        })
        .map_err(E::from)?;
        result.expect("transaction body ran")
    }

    /// Endpoints serving `model_name`, ordered by `(node_id, port)`.
    fn query_endpoints(&self, model_name: &str, ready_only: bool) -> Result<Vec<Endpoint>, StoreError> {
        self.transact(|tx| Ok(tx.query_endpoints(model_name, ready_only)))
    }

    /// Jobs of the configuration in states Submitted, Registered or Ready.
    fn count_jobs_by_configuration(&self, id: ConfigurationId) -> Result<usize, StoreError> {
        self.transact(|tx| tx.count_jobs_by_configuration(id))
    }
}

impl<S: StateStore + ?Sized> StoreExt for S {}

/// A write-capable view of the tables, valid for one transaction.
pub struct Transaction<'a> {
    tables: &'a mut Tables,
    stats: &'a StoreStats,
    undo: Vec<Undo>,
    redo: Vec<WriteOp>,
}

impl<'a> Transaction<'a> {
    fn new(tables: &'a mut Tables, stats: &'a StoreStats) -> Self {
        Self {
            tables,
            stats,
            undo: Vec::new(),
            redo: Vec::new(),
        }
    }

    pub fn tables(&self) -> &Tables {
        self.tables
    }

    /// A rejected op changes nothing, so the body may recover from it.
    fn write(&mut self, op: WriteOp) -> Result<(), StoreError> {
        let undo = self.tables.apply(&op)?;
        self.undo.extend(undo);
        self.redo.push(op);
        Ok(())
    }

    fn rollback(mut self) {
        while let Some(u) = self.undo.pop() {
            self.tables.undo(u);
        }
    }

    // -- reads --------------------------------------------------------------

    pub fn tenant(&self, id: TenantId) -> Option<&Tenant> {
        self.tables.tenants.get(&id)
    }

    pub fn authentication_by_digest(&self, digest: &KeyDigest) -> Option<&TenantAuthentication> {
        self.stats
            .authentication_lookups
            .fetch_add(1, Ordering::Relaxed);
        self.tables
            .authentications
            .values()
            .find(|a| a.key_digest == *digest)
    }

    pub fn configuration(&self, id: ConfigurationId) -> Option<&ModelConfiguration> {
        self.tables.configurations.get(&id)
    }

    pub fn configurations(&self) -> impl Iterator<Item = &ModelConfiguration> {
        self.tables.configurations.values()
    }

    pub fn enabled_configuration_for(&self, model_name: &str) -> Option<&ModelConfiguration> {
        self.tables
            .configurations
            .values()
            .find(|c| c.enabled && c.model_name == model_name)
    }

    pub fn job(&self, id: EndpointJobId) -> Option<&EndpointJob> {
        self.tables.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &EndpointJob> {
        self.tables.jobs.values()
    }

    pub fn endpoint(&self, id: EndpointId) -> Option<&Endpoint> {
        self.tables.endpoints.get(&id)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &Endpoint> {
        self.tables.endpoints.values()
    }

    pub fn endpoint_for_job(&self, job: EndpointJobId) -> Option<&Endpoint> {
        self.tables
            .endpoints
            .values()
            .find(|e| e.endpoint_job_id == job)
    }

    pub fn endpoints_on_node<'s>(&'s self, node_id: &'s str) -> impl Iterator<Item = &'s Endpoint> + 's {
        self.tables
            .endpoints
            .values()
            .filter(move |e| e.node_id == node_id)
    }

    pub fn query_endpoints(&self, model_name: &str, ready_only: bool) -> Vec<Endpoint> {
        self.stats.endpoint_queries.fetch_add(1, Ordering::Relaxed);
        let mut out: Vec<Endpoint> = self
            .tables
            .endpoints
            .values()
            .filter(|e| e.model_name == model_name && (!ready_only || e.is_ready()))
            .cloned()
            .collect();
        out.sort_by(|a, b| (&a.node_id, a.port).cmp(&(&b.node_id, b.port)));
        out
    }

    pub fn count_jobs_by_configuration(&self, id: ConfigurationId) -> Result<usize, StoreError> {
        if !self.tables.configurations.contains_key(&id) {
            return Err(StoreError::UnknownConfiguration(id));
        }
        Ok(self.tables.live_job_count(id))
    }

    // -- writes -------------------------------------------------------------

    /// Reserves a fresh id, unique across all tables.
    pub fn allocate_id(&mut self) -> Result<u64, StoreError> {
        let id = self.tables.next_id + 1;
        self.write(WriteOp::ReserveIds { next_id: id })?;
        Ok(id)
    }

    pub fn insert_tenant(&mut self, t: Tenant) -> Result<(), StoreError> {
        self.write(WriteOp::InsertTenant(t))
    }

    pub fn insert_authentication(&mut self, a: TenantAuthentication) -> Result<(), StoreError> {
        self.write(WriteOp::InsertAuthentication(a))
    }

    pub fn revoke_authentication(&mut self, id: AuthId, at: Timestamp) -> Result<(), StoreError> {
        self.write(WriteOp::RevokeAuthentication { id, at })
    }

    pub fn insert_configuration(&mut self, c: ModelConfiguration) -> Result<(), StoreError> {
        self.write(WriteOp::InsertConfiguration(c))
    }

    pub fn update_configuration(&mut self, c: ModelConfiguration) -> Result<(), StoreError> {
        self.write(WriteOp::UpdateConfiguration(c))
    }

    pub fn insert_job(&mut self, j: EndpointJob) -> Result<(), StoreError> {
        self.write(WriteOp::InsertJob(j))
    }

    pub fn update_job(&mut self, j: EndpointJob) -> Result<(), StoreError> {
        self.write(WriteOp::UpdateJob(j))
    }

    /// Deletes the job and, in the same step, its endpoint.
    pub fn delete_job(&mut self, id: EndpointJobId) -> Result<(), StoreError> {
        self.write(WriteOp::DeleteJob { id })
    }

    pub fn insert_endpoint(&mut self, e: Endpoint) -> Result<(), StoreError> {
        self.write(WriteOp::InsertEndpoint(e))
    }

    pub fn update_endpoint(&mut self, e: Endpoint) -> Result<(), StoreError> {
        self.write(WriteOp::UpdateEndpoint(e))
    }

    pub fn delete_endpoint(&mut self, id: EndpointId) -> Result<(), StoreError> {
        self.write(WriteOp::DeleteEndpoint { id })
    }
}

/// Shared transaction machinery: one mutex-protected table set. `persist`
/// sees the redo log of each would-be commit and may veto it.
pub(crate) struct Engine {
    tables: Mutex<Tables>,
    stats: StoreStats,
}

impl Engine {
    pub(crate) fn new(tables: Tables) -> Self {
        Self {
            tables: Mutex::new(tables),
            stats: StoreStats::default(),
        }
    }

    pub(crate) fn execute(
        &self,
        body: &mut dyn FnMut(&mut Transaction<'_>) -> Result<(), Rollback>,
        persist: &mut dyn FnMut(&[WriteOp]) -> Result<(), StoreError>,
    ) -> Result<(), StoreError> {
        let mut guard = self.tables.lock().unwrap_or_else(|p| p.into_inner());
        self.stats.transactions.fetch_add(1, Ordering::Relaxed);
        let mut tx = Transaction::new(&mut guard, &self.stats);
        if body(&mut tx).is_err() {
            tx.rollback();
            return Ok(());
        }
        if tx.redo.is_empty() {
            return Ok(());
        }
        let redo = std::mem::take(&mut tx.redo);
        if let Err(e) = persist(&redo) {
            tx.rollback();
            return Err(e);
        }
        Ok(())
    }

    pub(crate) fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub(crate) fn snapshot(&self) -> Tables {
        self.tables
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }
}
