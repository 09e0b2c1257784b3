//! Per-request latency records and their summary statistics.
//!
//! Times are seconds relative to the start of a benchmark run, taken from a
//! monotonic clock.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestTiming {
    pub index: u64,
    pub sent_at: f64,
    pub first_token_at: f64,
    pub last_token_at: f64,
    pub output_len: u32,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum TimingError {
    #[error("request did not succeed")]
    Failed,
    #[error("TPOT needs at least two output tokens")]
    InsufficientTokens,
}

impl RequestTiming {
    pub fn success(index: u64, sent_at: f64, first_token_at: f64, last_token_at: f64, output_len: u32) -> Self {
        Self {
            index,
            sent_at,
            first_token_at,
            last_token_at,
            output_len,
            success: true,
            error: None,
        }
    }

    /// A failed request; both token times are set to the failure time.
    pub fn failure(index: u64, sent_at: f64, failed_at: f64, error: impl Into<String>) -> Self {
        Self {
            index,
            sent_at,
            first_token_at: failed_at,
            last_token_at: failed_at,
            output_len: 0,
            success: false,
            error: Some(error.into()),
        }
    }

    pub fn ttft(&self) -> f64 {
        self.first_token_at - self.sent_at
    }

    pub fn e2el(&self) -> f64 {
        self.last_token_at - self.sent_at
    }

    /// `(e2el - ttft) / (output_len - 1)`.
    pub fn tpot(&self) -> Result<f64, TimingError> {
        if !self.success {
            return Err(TimingError::Failed);
        }
        if self.output_len < 2 {
            return Err(TimingError::InsufficientTokens);
        }
        Ok((self.e2el() - self.ttft()) / f64::from(self.output_len - 1))
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.success {
            return Ok(());
        }
        if !(self.sent_at <= self.first_token_at && self.first_token_at <= self.last_token_at) {
            return Err(format!("request {} has out-of-order timestamps", self.index));
        }
        if self.output_len < 1 {
            return Err(format!("request {} succeeded with no output", self.index));
        }
        Ok(())
    }
}

/// Mean, median, population standard deviation and 99th percentile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
    pub p99: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stats {
            count: sorted.len(),
            mean,
            median: percentile(&sorted, 50.0),
            stddev: var.sqrt(),
            p99: percentile(&sorted, 99.0),
        }
    }
}

/// Linear interpolation between closest ranks over sorted input.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let rank = q / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ttft: Stats,
    pub tpot: Stats,
    pub e2el: Stats,
    /// Seconds from the first send to the last completion.
    pub total_duration: f64,
    pub request_count: usize,
    pub failure_count: usize,
    /// Successful requests left out of TPOT because they had one token.
    pub tpot_excluded: usize,
}

impl MetricsSummary {
    pub fn from_timings(timings: &[RequestTiming]) -> MetricsSummary {
        let ok: Vec<&RequestTiming> = timings.iter().filter(|t| t.success).collect();
        let mut tpots = Vec::with_capacity(ok.len());
        let mut excluded = 0;
        for t in &ok {
            match t.tpot() {
                Ok(v) => tpots.push(v),
                Err(_) => excluded += 1,
            }
        }
        let ttfts: Vec<f64> = ok.iter().map(|t| t.ttft()).collect();
        let e2els: Vec<f64> = ok.iter().map(|t| t.e2el()).collect();
        let total_duration = match (
            timings.iter().map(|t| t.sent_at).min_by(f64::total_cmp),
            timings.iter().map(|t| t.last_token_at).max_by(f64::total_cmp),
        ) {
            (Some(start), Some(end)) => end - start,
            _ => 0.0,
        };
        MetricsSummary {
            ttft: Stats::of(&ttfts),
            tpot: Stats::of(&tpots),
            e2el: Stats::of(&e2els),
            total_duration,
            request_count: timings.len(),
            failure_count: timings.len() - ok.len(),
            tpot_excluded: excluded,
        }
    }
}
