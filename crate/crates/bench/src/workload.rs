//! What a benchmark run sends: the workload description and the seeded
//! request sequence derived from it.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;
use crate::trace::{load_trace, TraceColumns};

/// Where request sizes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// Every request asks for `max_tokens` with a prompt of `input_tokens` words.
    Synthetic { input_tokens: u32, max_tokens: u32 },
    Trace {
        path: PathBuf,
        #[serde(default)]
        columns: TraceColumns,
    },
}

impl Default for Source {
    fn default() -> Self {
        Source::Synthetic {
            input_tokens: 32,
            max_tokens: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub target_url: String,
    pub model: String,
    pub concurrency: u32,
    pub total_requests: u64,
    pub seed: u64,
    #[serde(default)]
    pub source: Source,
    /// Sent as the bearer token; never written to reports.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.concurrency == 0 {
            return Err(BenchError::InvalidSpec("concurrency must be positive".into()));
        }
        if self.model.is_empty() {
            return Err(BenchError::InvalidSpec("model is empty".into()));
        }
        if !(self.target_url.starts_with("http://") || self.target_url.starts_with("https://")) {
            return Err(BenchError::InvalidSpec(format!("target {:?} is not an http(s) URL", self.target_url)));
        }
        Ok(())
    }

    /// Fields two runs must share to be comparable (everything but the target).
    pub fn mismatch(&self, other: &WorkloadSpec) -> Option<&'static str> {
        if self.model != other.model {
            Some("model")
        } else if self.concurrency != other.concurrency {
            Some("concurrency")
        } else if self.total_requests != other.total_requests {
            Some("total_requests")
        } else if self.seed != other.seed {
            Some("seed")
        } else if self.source != other.source {
            Some("source")
        } else {
            None
        }
    }
}

/// Size of one request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSample {
    pub input_tokens: u32,
    pub max_tokens: u32,
}

const WORDS: [&str; 16] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa",
];

/// A prompt of `words` words, determined by `(seed, index)`.
pub fn prompt(seed: u64, index: u64, words: u32) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..words.max(1))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// The request sequence of a run. The seed alone fixes it.
pub fn samples(spec: &WorkloadSpec) -> Result<Vec<RequestSample>, BenchError> {
    match &spec.source {
        Source::Synthetic {
            input_tokens,
            max_tokens,
        } => Ok(vec![
            RequestSample {
                input_tokens: *input_tokens,
                max_tokens: *max_tokens,
            };
            spec.total_requests as usize
        ]),
        Source::Trace { path, columns } => {
            let file = std::fs::File::open(path)
                .map_err(|e| BenchError::MalformedTrace(format!("{}: {e}", path.display())))?;
            load_trace(file, columns, spec.total_requests, spec.seed)
        }
    }
}
