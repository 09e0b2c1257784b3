//! Periodic drivers for the job worker, endpoint worker and rule evaluator
//! against the wall clock. Each stops when `shutdown` flips to `true`.

use std::sync::{Arc, RwLock};
use std::time::Duration;

use llmscale_core::health::{Decision, EndpointWorker};
use llmscale_core::jobs::JobWorker;
use llmscale_core::scaling::{Evaluator, MetricSeries, MetricsScraper, ScaleController};
use llmscale_core::{Clock, StateStore, SystemClock};
use tokio::sync::{watch, Notify};
use tokio::time::{interval, MissedTickBehavior};

fn ticker(period: Duration) -> tokio::time::Interval {
    let mut t = interval(period);
    t.set_missed_tick_behavior(MissedTickBehavior::Skip);
    t
}

async fn stopped(shutdown: &mut watch::Receiver<bool>) {
    while !*shutdown.borrow_and_update() {
        if shutdown.changed().await.is_err() {
            return;
        }
    }
}

pub async fn run_job_worker(worker: Arc<JobWorker>, period: Duration, mut shutdown: watch::Receiver<bool>) {
    let mut t = ticker(period);
    loop {
        tokio::select! {
            _ = t.tick() => {}
            _ = stopped(&mut shutdown) => return,
        }
        let report = tokio::select! {
            r = worker.reconcile_once(&SystemClock, &SystemClock) => r,
            _ = stopped(&mut shutdown) => return,
        };
        if !report.is_noop() {
            tracing::info!(
                action = "reconcile_pass",
                submitted = report.submitted.len(),
                cancelled = report.cancelled.len(),
                errors = report.errors.len(),
            );
        }
    }
}

/// Sweeps every `period`, and also right away when `recheck` is notified.
pub async fn run_endpoint_worker(
    worker: Arc<EndpointWorker>,
    period: Duration,
    recheck: Arc<Notify>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut t = ticker(period);
    loop {
        tokio::select! {
            _ = t.tick() => {}
            _ = recheck.notified() => {}
            _ = stopped(&mut shutdown) => return,
        }
        let report = worker.sweep(SystemClock.now()).await;
        let ready = report.count(Decision::MarkReady);
        let expired = report.count(Decision::Expire);
        if ready + expired > 0 || !report.errors.is_empty() {
            tracing::info!(action = "sweep", ready, expired, errors = report.errors.len());
        }
    }
}

pub async fn run_evaluator(
    mut evaluator: Evaluator,
    period: Duration,
    store: Arc<dyn StateStore>,
    scraper: Arc<dyn MetricsScraper>,
    controller: Arc<ScaleController>,
    series: Arc<RwLock<Vec<MetricSeries>>>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut t = ticker(period);
    loop {
        tokio::select! {
            _ = t.tick() => {}
            _ = stopped(&mut shutdown) => return,
        }
        match evaluator
            .tick(SystemClock.now(), store.as_ref(), scraper.as_ref(), &controller)
            .await
        {
            Ok(report) => {
                if report.unreachable > 0 {
                    tracing::debug!(unreachable = report.unreachable, "some endpoints were not scraped");
                }
            }
            Err(e) => tracing::error!(error = %e, "evaluator cannot read the store"),
        }
        *series.write().unwrap_or_else(|p| p.into_inner()) = evaluator.snapshot();
    }
}
