//! The job worker: reconciles live endpoint jobs against each
//! configuration's desired instance count.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use crate::auth::CallbackTokens;
use crate::clock::{Clock, Sleeper, Timestamp};
use crate::model::{ConfigurationId, EndpointJob, EndpointJobId, JobState, ModelConfiguration};
use crate::store::{StateStore, StoreError, StoreExt};
use crate::submit::{JobSubmitter, SubmitSpec};
use crate::telemetry::ControlPlaneMetrics;

pub const DEFAULT_RECONCILE_INTERVAL: Duration = Duration::from_secs(15);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReconcileAction {
    Submit {
        configuration_id: ConfigurationId,
        count: u32,
    },
    Cancel {
        configuration_id: ConfigurationId,
        jobs: Vec<EndpointJobId>,
    },
}

/// The action needed to bring one configuration to its target, given all
/// jobs (jobs of other configurations are ignored).
pub fn plan_configuration(config: &ModelConfiguration, jobs: &[EndpointJob]) -> Option<ReconcileAction> {
    let mut live: Vec<&EndpointJob> = jobs
        .iter()
        .filter(|j| j.configuration_id == config.id && j.state.is_live())
        .collect();
    let target = if config.enabled {
        config.target_instances() as usize
    } else {
        0
    };
    if live.len() < target {
        return Some(ReconcileAction::Submit {
            configuration_id: config.id,
            count: (target - live.len()) as u32,
        });
    }
    if live.len() == target {
        return None;
    }
    // Not-ready jobs before ready ones, newest first within each group.
    live.sort_by(|a, b| {
        let ready = |j: &EndpointJob| j.state == JobState::Ready;
        ready(a)
            .cmp(&ready(b))
            .then(b.submitted_at.cmp(&a.submitted_at))
            .then(b.id.cmp(&a.id))
    });
    Some(ReconcileAction::Cancel {
        configuration_id: config.id,
        jobs: live[..live.len() - target].iter().map(|j| j.id).collect(),
    })
}

/// Pure planning over every configuration.
pub fn plan(configurations: &[ModelConfiguration], jobs: &[EndpointJob]) -> Vec<ReconcileAction> {
    configurations
        .iter()
        .filter_map(|c| plan_configuration(c, jobs))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubmittedJob {
    pub configuration_id: ConfigurationId,
    pub endpoint_job_id: EndpointJobId,
    pub scheduler_job_id: String,
    pub at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PassReport {
    pub submitted: Vec<SubmittedJob>,
    pub cancelled: Vec<(ConfigurationId, EndpointJobId)>,
    pub errors: Vec<(ConfigurationId, String)>,
    pub scheduler_calls: usize,
}

impl PassReport {
    pub fn is_noop(&self) -> bool {
        self.scheduler_calls == 0
    }
}

/// Outcome of advancing a pass.
#[derive(Debug, PartialEq, Eq)]
pub enum Step {
    /// Call [`JobWorker::step`] again after this long.
    Wait(Duration),
    Done(PassReport),
}

struct Current {
    id: ConfigurationId,
    remaining_submits: Option<u32>,
}

/// One reconcile pass in progress. Configurations are handled one after
/// another; the pass pauses before a submission that follows an earlier one.
pub struct ReconcilePass {
    queue: VecDeque<ConfigurationId>,
    current: Option<Current>,
    pending_wait: Option<Duration>,
    report: PassReport,
}

pub struct JobWorker {
    store: Arc<dyn StateStore>,
    scheduler: Arc<dyn JobSubmitter>,
    tokens: CallbackTokens,
    callback_url: String,
    metrics: Arc<ControlPlaneMetrics>,
}

impl JobWorker {
    pub fn new(
        store: Arc<dyn StateStore>,
        scheduler: Arc<dyn JobSubmitter>,
        tokens: CallbackTokens,
        callback_url: impl Into<String>,
        metrics: Arc<ControlPlaneMetrics>,
    ) -> Self {
        Self {
            store,
            scheduler,
            tokens,
            callback_url: callback_url.into(),
            metrics,
        }
    }

    pub fn begin_pass(&self) -> ReconcilePass {
        let queue = self
            .store
            .transact(|tx| Ok::<_, StoreError>(tx.configurations().map(|c| c.id).collect()))
            .unwrap_or_else(|e| {
                tracing::error!(error = %e, "cannot list configurations");
                VecDeque::new()
            });
        ReconcilePass {
            queue,
            current: None,
            pending_wait: None,
            report: PassReport::default(),
        }
    }

    /// Runs a whole pass, sleeping between submissions.
    pub async fn reconcile_once(&self, clock: &dyn Clock, sleeper: &dyn Sleeper) -> PassReport {
        let mut pass = self.begin_pass();
        loop {
            match self.step(&mut pass, clock.now()).await {
                Step::Wait(d) => sleeper.sleep(d).await,
                Step::Done(report) => return report,
            }
        }
    }

    pub async fn step(&self, pass: &mut ReconcilePass, now: Timestamp) -> Step {
        loop {
            let Some(current) = pass.current.as_mut() else {
                match pass.queue.pop_front() {
                    Some(id) => {
                        pass.current = Some(Current {
                            id,
                            remaining_submits: None,
                        });
                        continue;
                    }
                    None => return Step::Done(std::mem::take(&mut pass.report)),
                }
            };
            let id = current.id;
            if current.remaining_submits == Some(0) {
                pass.current = None;
                continue;
            }
            let state = self.store.transact(|tx| {
                Ok::<_, StoreError>((
                    tx.configuration(id).cloned(),
                    tx.jobs().filter(|j| j.configuration_id == id).cloned().collect::<Vec<_>>(),
                ))
            });
            let (config, jobs) = match state {
                Ok((Some(c), jobs)) => (c, jobs),
                Ok((None, _)) => {
                    pass.current = None;
                    continue;
                }
                Err(e) => {
                    pass.report.errors.push((id, e.to_string()));
                    pass.current = None;
                    continue;
                }
            };
            match plan_configuration(&config, &jobs) {
                None => pass.current = None,
                Some(ReconcileAction::Submit { count, .. }) => {
                    if let Some(d) = pass.pending_wait.take() {
                        return Step::Wait(d);
                    }
                    let remaining = current.remaining_submits.get_or_insert(count);
                    *remaining -= 1;
                    match self.submit_one(&config, now, &mut pass.report).await {
                        Ok(job) => {
                            pass.report.submitted.push(job);
                            if !config.post_submit_wait.is_zero() {
                                pass.pending_wait = Some(config.post_submit_wait);
                            }
                        }
                        Err(e) => {
                            tracing::warn!(action = "submit_failed", configuration_id = %id, error = %e);
                            pass.report.errors.push((id, e));
                            pass.current = None;
                        }
                    }
                }
                Some(ReconcileAction::Cancel { jobs: victims, .. }) => {
                    for job_id in victims {
                        if let Err(e) = self.cancel_one(&jobs, job_id, &mut pass.report).await {
                            tracing::warn!(action = "cancel_failed", configuration_id = %id, error = %e);
                            pass.report.errors.push((id, e));
                            break;
                        }
                        pass.report.cancelled.push((id, job_id));
                    }
                    pass.current = None;
                }
            }
        }
    }

    async fn submit_one(
        &self,
        config: &ModelConfiguration,
        now: Timestamp,
        report: &mut PassReport,
    ) -> Result<SubmittedJob, String> {
        let endpoint_job_id = EndpointJobId(
            self.store
                .transact(|tx| tx.allocate_id())
                .map_err(|e| e.to_string())?,
        );
        let spec = SubmitSpec {
            endpoint_job_id,
            model_name: config.model_name.clone(),
            model_version: config.model_version.clone(),
            template_name: config.template_name.clone(),
            capabilities: config.capabilities.clone(),
            callback_url: self.callback_url.clone(),
            callback_token: self.tokens.token_for(endpoint_job_id),
        };
        report.scheduler_calls += 1;
        let scheduler_job_id = self.scheduler.submit(&spec).await.map_err(|e| e.to_string())?;
        let job = EndpointJob::submitted(endpoint_job_id, config.id, scheduler_job_id.clone(), now);
        let mut result = self.store.transact(|tx| tx.insert_job(job.clone()));
        if matches!(result, Err(StoreError::Conflict(_))) {
            result = self.store.transact(|tx| tx.insert_job(job.clone()));
        }
        if let Err(e) = result {
            report.scheduler_calls += 1;
            let _ = self.scheduler.cancel(&scheduler_job_id).await;
            return Err(format!("recording job failed: {e}"));
        }
        self.metrics.reconcile_submits.inc();
        tracing::info!(
            action = "submit",
            configuration_id = %config.id,
            model = %config.model_name,
            endpoint_job_id = %endpoint_job_id,
            scheduler_job_id = %scheduler_job_id,
            at = %now,
        );
        Ok(SubmittedJob {
            configuration_id: config.id,
            endpoint_job_id,
            scheduler_job_id,
            at: now,
        })
    }

    async fn cancel_one(&self, jobs: &[EndpointJob], id: EndpointJobId, report: &mut PassReport) -> Result<(), String> {
        let job = jobs.iter().find(|j| j.id == id).ok_or("job vanished")?;
        report.scheduler_calls += 1;
        self.scheduler
            .cancel(&job.scheduler_job_id)
            .await
            .map_err(|e| e.to_string())?;
        match self.store.transact(|tx| tx.delete_job(id)) {
            Ok(()) | Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(e.to_string()),
        }
        self.metrics.reconcile_cancels.inc();
        tracing::info!(
            action = "cancel",
            configuration_id = %job.configuration_id,
            endpoint_job_id = %id,
            scheduler_job_id = %job.scheduler_job_id,
        );
        Ok(())
    }
}
