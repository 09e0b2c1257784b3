//! The endpoint worker: probes each job's server, promotes healthy ones to
//! ready, and expires jobs that never start or stop answering.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};

use crate::clock::Timestamp;
use crate::model::{Endpoint, EndpointJob, EndpointJobId, JobState};
use crate::store::{StateStore, StoreError, StoreExt};
use crate::submit::JobSubmitter;
use crate::telemetry::ControlPlaneMetrics;

pub const DEFAULT_SWEEP_INTERVAL: Duration = Duration::from_secs(5);
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_PROBE_CONCURRENCY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    MarkReady,
    NoChange,
    StillStarting,
    Expire,
}

/// Decides what to do with one job. `probe_ok` is `None` when the job has no
/// endpoint to probe yet.
pub fn check_one(
    job: &EndpointJob,
    endpoint: Option<&Endpoint>,
    probe_ok: Option<bool>,
    startup_timeout: Duration,
    now: Timestamp,
) -> Decision {
    let timed_out = now.saturating_since(job.submitted_at) >= startup_timeout;
    let was_ready = job.ready_at.is_some() || endpoint.is_some_and(Endpoint::is_ready);
    match (endpoint, probe_ok) {
        (Some(e), Some(true)) => {
            if job.ready_at.is_some() && e.is_ready() {
                Decision::NoChange
            } else {
                Decision::MarkReady
            }
        }
        _ if was_ready || timed_out => Decision::Expire,
        _ => Decision::StillStarting,
    }
}

/// Checks whether an inference server is up (HTTP `GET /health` returning 200).
#[async_trait]
pub trait HealthProbe: Send + Sync {
    async fn probe(&self, endpoint: &Endpoint) -> bool;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub decisions: Vec<(EndpointJobId, Decision)>,
    pub errors: Vec<(EndpointJobId, String)>,
}

impl SweepReport {
    pub fn count(&self, d: Decision) -> usize {
        self.decisions.iter().filter(|(_, x)| *x == d).count()
    }
}

pub struct EndpointWorker {
    store: Arc<dyn StateStore>,
    probe: Arc<dyn HealthProbe>,
    scheduler: Arc<dyn JobSubmitter>,
    concurrency: usize,
    metrics: Arc<ControlPlaneMetrics>,
}

impl EndpointWorker {
    pub fn new(
        store: Arc<dyn StateStore>,
        probe: Arc<dyn HealthProbe>,
        scheduler: Arc<dyn JobSubmitter>,
        concurrency: usize,
        metrics: Arc<ControlPlaneMetrics>,
    ) -> Self {
        Self {
            store,
            probe,
            scheduler,
            concurrency: concurrency.max(1),
            metrics,
        }
    }

    pub async fn sweep(&self, now: Timestamp) -> SweepReport {
        let snapshot = self.store.transact(|tx| {
            let endpoints: BTreeMap<EndpointJobId, Endpoint> =
                tx.endpoints().map(|e| (e.endpoint_job_id, e.clone())).collect();
            let jobs: Vec<(EndpointJob, Duration)> = tx
                .jobs()
                .filter(|j| j.state.is_live())
                .map(|j| {
                    let timeout = tx
                        .configuration(j.configuration_id)
                        .map_or(crate::model::DEFAULT_STARTUP_TIMEOUT, |c| c.startup_timeout);
                    (j.clone(), timeout)
                })
                .collect();
            Ok::<_, StoreError>((jobs, endpoints))
        });
        let (jobs, mut endpoints) = match snapshot {
            Ok(s) => s,
            Err(e) => {
                tracing::error!(error = %e, "sweep cannot read the store");
                return SweepReport::default();
            }
        };

        let pending: Vec<_> = jobs
            .iter()
            .map(|(job, _)| {
                let endpoint = endpoints.get(&job.id).cloned();
                let probe = self.probe.clone();
                async move {
                    match endpoint {
                        Some(e) => Some(probe.probe(&e).await),
                        None => None,
                    }
                }
            })
            .collect();
        let probes: Vec<Option<bool>> = stream::iter(pending).buffered(self.concurrency).collect().await;

        let mut report = SweepReport::default();
        for ((job, timeout), probe_ok) in jobs.iter().zip(probes) {
            let endpoint = endpoints.remove(&job.id);
            let decision = check_one(job, endpoint.as_ref(), probe_ok, *timeout, now);
            let applied = match decision {
                Decision::MarkReady => self.mark_ready(job.id, now),
                Decision::Expire => self.expire(job).await,
                Decision::NoChange | Decision::StillStarting => Ok(()),
            };
            match applied {
                Ok(()) => report.decisions.push((job.id, decision)),
                Err(e) => {
                    tracing::warn!(endpoint_job_id = %job.id, ?decision, error = %e, "decision deferred");
                    report.errors.push((job.id, e.to_string()));
                }
            }
        }
        report
    }

    fn mark_ready(&self, id: EndpointJobId, now: Timestamp) -> Result<(), StoreError> {
        self.store.transact(|tx| {
            let (Some(job), Some(endpoint)) = (tx.job(id).cloned(), tx.endpoint_for_job(id).cloned()) else {
                return Ok(());
            };
            let at = now.max(job.registered_at.unwrap_or(job.submitted_at));
            tx.update_job(EndpointJob {
                registered_at: Some(job.registered_at.unwrap_or(at)),
                ready_at: Some(at),
                state: JobState::Ready,
                ..job
            })?;
            tx.update_endpoint(Endpoint {
                ready_at: Some(at),
                ..endpoint
            })
        })?;
        self.metrics.endpoints_ready.inc();
        tracing::info!(action = "mark_ready", endpoint_job_id = %id, at = %now);
        Ok(())
    }

    async fn expire(&self, job: &EndpointJob) -> Result<(), StoreError> {
        match self.store.transact(|tx| tx.delete_job(job.id)) {
            Ok(()) | Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
        self.metrics.endpoints_expired.inc();
        tracing::info!(action = "expire", endpoint_job_id = %job.id, scheduler_job_id = %job.scheduler_job_id);
        if let Err(e) = self.scheduler.cancel(&job.scheduler_job_id).await {
            tracing::warn!(scheduler_job_id = %job.scheduler_job_id, error = %e, "cancel after expiry failed");
        }
        Ok(())
    }
}
