use std::time::Duration;

use serde::{Deserialize, Serialize};

/// How many tokens a mock request produces when not capped by `max_tokens`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputLen {
    Fixed { n: u32 },
    Uniform { min: u32, max: u32 },
}

/// Latency and capacity behaviour of a mock inference server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockServerProfile {
    /// Requests decoded at once; later arrivals wait in a FCFS queue.
    pub concurrency_capacity: u32,
    #[serde(with = "humantime_serde")]
    pub ttft_base: Duration,
    #[serde(with = "humantime_serde")]
    pub tpot_base: Duration,
    pub output_len: OutputLen,
    /// Relative standard deviation applied to every delay; 0 disables it.
    #[serde(default)]
    pub jitter: f64,
}

impl Default for MockServerProfile {
    fn default() -> Self {
        Self {
            concurrency_capacity: 8,
            ttft_base: Duration::from_millis(200),
            tpot_base: Duration::from_millis(50),
            output_len: OutputLen::Fixed { n: 20 },
            jitter: 0.0,
        }
    }
}

impl MockServerProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.concurrency_capacity == 0 {
            return Err("concurrency_capacity must be at least 1".into());
        }
        if self.ttft_base.is_zero() || self.tpot_base.is_zero() {
            return Err("ttft_base and tpot_base must be positive".into());
        }
        match self.output_len {
            OutputLen::Fixed { n: 0 } => return Err("output_len must be at least 1".into()),
            OutputLen::Uniform { min, max } if min == 0 || min > max => {
                return Err("output_len range must satisfy 1 <= min <= max".into())
            }
            _ => {}
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err("jitter must be a non-negative number".into());
        }
        Ok(())
    }
}
