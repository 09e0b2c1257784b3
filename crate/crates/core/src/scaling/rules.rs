use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::webhook::{ScaleCommand, ScaleDirection};
use crate::clock::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdDirection {
    Above,
    Below,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

/// Fires when a metric stays beyond a threshold for a sustained period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub name: String,
    pub metric_name: String,
    pub threshold: f64,
    #[serde(default)]
    pub unit: String,
    pub direction: ThresholdDirection,
    #[serde(with = "humantime_serde")]
    pub sustained_for: Duration,
    pub action: ScaleDirection,
    #[serde(default = "one")]
    pub magnitude: u32,
    #[serde(with = "humantime_serde")]
    pub cooldown: Duration,
    #[serde(default = "yes")]
    pub enabled: bool,
}

impl AlertRule {
    /// Queue time above 5 s for 30 s adds one instance.
    pub fn default_scale_up() -> Self {
        Self {
            name: "queue-time-high".into(),
            metric_name: "sim_queue_time_seconds".into(),
            threshold: 5.0,
            unit: "s".into(),
            direction: ThresholdDirection::Above,
            sustained_for: Duration::from_secs(30),
            action: ScaleDirection::Up,
            magnitude: 1,
            cooldown: Duration::from_secs(300),
            enabled: true,
        }
    }

    /// An empty queue for five minutes removes one instance. Off by default.
    pub fn default_scale_down() -> Self {
        Self {
            name: "queue-time-idle".into(),
            metric_name: "sim_queue_time_seconds".into(),
            threshold: 0.001,
            unit: "s".into(),
            direction: ThresholdDirection::Below,
            sustained_for: Duration::from_secs(300),
            action: ScaleDirection::Down,
            magnitude: 1,
            cooldown: Duration::from_secs(600),
            enabled: false,
        }
    }

    pub fn defaults() -> Vec<AlertRule> {
        vec![Self::default_scale_up(), Self::default_scale_down()]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sustained_for.is_zero() {
            return Err(format!("rule {:?}: sustained_for must be positive", self.name));
        }
        if self.magnitude == 0 {
            return Err(format!("rule {:?}: magnitude must be positive", self.name));
        }
        if !self.threshold.is_finite() {
            return Err(format!("rule {:?}: threshold must be finite", self.name));
        }
        Ok(())
    }

    pub fn violated_by(&self, value: f64) -> bool {
        match self.direction {
            ThresholdDirection::Above => value > self.threshold,
            ThresholdDirection::Below => value < self.threshold,
        }
    }
}

/// Samples of one metric for one model, strictly increasing in time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric_name: String,
    pub model_name: String,
    pub samples: Vec<(Timestamp, f64)>,
}

impl MetricSeries {
    pub fn new(metric_name: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            metric_name: metric_name.into(),
            model_name: model_name.into(),
            samples: Vec::new(),
        }
    }

    /// Appends a sample; out-of-order or duplicate timestamps are dropped.
    pub fn push(&mut self, at: Timestamp, value: f64) -> bool {
        if self.samples.last().is_some_and(|(t, _)| *t >= at) || value.is_nan() {
            return false;
        }
        self.samples.push((at, value));
        true
    }

    pub fn prune_before(&mut self, cutoff: Timestamp) {
        let keep_from = self.samples.partition_point(|(t, _)| *t < cutoff);
        self.samples.drain(..keep_from);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Firing {
    pub rule: String,
    pub model_name: String,
    pub firing_id: String,
    pub at: Timestamp,
    pub value: f64,
    pub command: ScaleCommand,
}

/// Decides whether `rule` fires for `series` at `now`.
///
/// The evaluated samples are those in `(now - sustained_for, now]` plus the
/// latest one at or before the window start, which anchors the violation at
/// least `sustained_for` back. All of them must violate the threshold, no two
/// consecutive ones may be more than twice the scrape interval apart, and the
/// newest must be within twice the scrape interval of `now`. A rule that fired
/// at `last_fired` stays quiet until its cooldown has passed.
pub fn evaluate_rule(
    rule: &AlertRule,
    series: &MetricSeries,
    now: Timestamp,
    last_fired: Option<Timestamp>,
    scrape_interval: Duration,
) -> Option<Firing> {
    if !rule.enabled || rule.sustained_for.is_zero() {
        return None;
    }
    if let Some(at) = last_fired {
        if now.saturating_since(at) < rule.cooldown {
            return None;
        }
    }
    let start = now.saturating_sub(rule.sustained_for);
    let anchor = series.samples.partition_point(|(t, _)| *t <= start).checked_sub(1)?;
    let window: Vec<&(Timestamp, f64)> = series.samples[anchor..]
        .iter()
        .take_while(|(t, _)| *t <= now)
        .collect();
    let last = window.last()?;
    let max_gap = scrape_interval * 2;
    if now.saturating_since(last.0) > max_gap {
        return None;
    }
    if window.windows(2).any(|w| w[1].0.saturating_since(w[0].0) > max_gap) {
        return None;
    }
    if !window.iter().all(|(_, v)| rule.violated_by(*v)) {
        return None;
    }
    let firing_id = format!("{}/{}/{}", rule.name, series.model_name, now.as_millis());
    Some(Firing {
        rule: rule.name.clone(),
        model_name: series.model_name.clone(),
        firing_id: firing_id.clone(),
        at: now,
        value: last.1,
        command: ScaleCommand {
            model_name: series.model_name.clone(),
            direction: rule.action,
            magnitude: rule.magnitude,
            firing_id: Some(firing_id),
            reason: format!(
                "{} {} {}{} for {}s (last {})",
                rule.metric_name,
                match rule.direction {
                    ThresholdDirection::Above => "above",
                    ThresholdDirection::Below => "below",
                },
                rule.threshold,
                rule.unit,
                rule.sustained_for.as_secs(),
                last.1
            ),
        },
    })
}
