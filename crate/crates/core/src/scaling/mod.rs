//! Service discovery for metrics scraping, the scaling webhook, and the
//! built-in alert-rule evaluator that drives it.

pub mod discovery;
pub mod evaluator;
pub mod exposition;
pub mod rules;
pub mod webhook;

pub use discovery::{discovery_targets, TargetGroup, BEARER_TOKEN_LABEL};
pub use evaluator::{Evaluator, MetricsScraper, TickReport, DEFAULT_SCRAPE_INTERVAL, SERIES_RETENTION};
pub use rules::{evaluate_rule, AlertRule, Firing, MetricSeries, ThresholdDirection};
pub use webhook::{ScaleCommand, ScaleController, ScaleDirection, ScaleError, ScaleOutcome};
