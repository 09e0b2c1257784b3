use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};

use super::exposition::metric_value;
use super::rules::{evaluate_rule, AlertRule, Firing, MetricSeries};
use super::webhook::{ScaleController, ScaleError, ScaleOutcome};
use crate::clock::Timestamp;
use crate::model::Endpoint;
use crate::store::{StateStore, StoreError, StoreExt};

pub const DEFAULT_SCRAPE_INTERVAL: Duration = Duration::from_secs(5);
pub const SERIES_RETENTION: Duration = Duration::from_secs(600);
const SCRAPE_CONCURRENCY: usize = 16;

/// Fetches an endpoint's metrics page in text exposition format.
#[async_trait]
pub trait MetricsScraper: Send + Sync {
    async fn scrape(&self, endpoint: &Endpoint) -> Option<String>;
}

#[derive(Debug, Default)]
pub struct TickReport {
    pub scraped: usize,
    pub unreachable: usize,
    pub samples: Vec<(String, String, f64)>,
    pub firings: Vec<(Firing, Result<ScaleOutcome, ScaleError>)>,
}

/// Keeps per-model metric series and evaluates alert rules over them.
pub struct Evaluator {
    rules: Vec<AlertRule>,
    scrape_interval: Duration,
    series: BTreeMap<(String, String), MetricSeries>,
    last_fired: HashMap<(String, String), Timestamp>,
}

impl Evaluator {
    pub fn new(rules: Vec<AlertRule>, scrape_interval: Duration) -> Self {
        Self {
            rules,
            scrape_interval,
            series: BTreeMap::new(),
            last_fired: HashMap::new(),
        }
    }

    pub fn rules(&self) -> &[AlertRule] {
        &self.rules
    }

    fn metric_names(&self) -> BTreeSet<String> {
        self.rules
            .iter()
            .filter(|r| r.enabled)
            .map(|r| r.metric_name.clone())
            .collect()
    }

    pub fn record(&mut self, metric: &str, model: &str, at: Timestamp, value: f64) {
        let series = self
            .series
            .entry((metric.to_string(), model.to_string()))
            .or_insert_with(|| MetricSeries::new(metric, model));
        series.push(at, value);
        series.prune_before(at.saturating_sub(SERIES_RETENTION));
    }

    pub fn series(&self, metric: &str, model: &str) -> Option<&MetricSeries> {
        self.series.get(&(metric.to_string(), model.to_string()))
    }

    pub fn snapshot(&self) -> Vec<MetricSeries> {
        self.series.values().cloned().collect()
    }

    /// Evaluates every enabled rule for every model with data.
    pub fn evaluate(&mut self, now: Timestamp) -> Vec<Firing> {
        let mut firings = Vec::new();
        for rule in self.rules.iter().filter(|r| r.enabled) {
            for ((metric, model), series) in &self.series {
                if *metric != rule.metric_name {
                    continue;
                }
                let key = (rule.name.clone(), model.clone());
                let last = self.last_fired.get(&key).copied();
                if let Some(f) = evaluate_rule(rule, series, now, last, self.scrape_interval) {
                    self.last_fired.insert(key, now);
                    firings.push(f);
                }
            }
        }
        firings
    }

    /// Scrapes every ready endpoint, records the per-model maximum of each
    /// rule metric, evaluates, and applies firings through `controller`.
    pub async fn tick(
        &mut self,
        now: Timestamp,
        store: &dyn StateStore,
        scraper: &dyn MetricsScraper,
        controller: &ScaleController,
    ) -> Result<TickReport, StoreError> {
        let endpoints: Vec<Endpoint> = store.transact(|tx| {
            Ok::<_, StoreError>(tx.endpoints().filter(|e| e.is_ready()).cloned().collect())
        })?;
        let pending: Vec<_> = endpoints.iter().map(|e| scraper.scrape(e)).collect();
        let pages: Vec<Option<String>> = stream::iter(pending).buffered(SCRAPE_CONCURRENCY).collect().await;

        let mut report = TickReport::default();
        let metrics = self.metric_names();
        let mut per_model: BTreeMap<(String, String), f64> = BTreeMap::new();
        for (endpoint, page) in endpoints.iter().zip(&pages) {
            let Some(page) = page else {
                report.unreachable += 1;
                continue;
            };
            report.scraped += 1;
            for metric in &metrics {
                if let Some(v) = metric_value(page, metric) {
                    per_model
                        .entry((metric.clone(), endpoint.model_name.clone()))
                        .and_modify(|m| *m = m.max(v))
                        .or_insert(v);
                }
            }
        }
        for ((metric, model), value) in per_model {
            self.record(&metric, &model, now, value);
            report.samples.push((model, metric, value));
        }
        for firing in self.evaluate(now) {
            tracing::info!(
                action = "alert_firing",
                rule = %firing.rule,
                model = %firing.model_name,
                firing_id = %firing.firing_id,
                value = firing.value,
            );
            let outcome = controller.apply(&firing.command);
            report.firings.push((firing, outcome));
        }
        Ok(report)
    }
}
