//! Load generation and latency reporting: closed-loop streaming requests
//! against an OpenAI-compatible target, TTFT/TPOT/E2EL summaries, and
//! comparison of two runs (e.g. through the gateway versus direct).

pub mod client;
pub mod error;
pub mod report;
pub mod sim;
pub mod sse;
pub mod trace;
pub mod workload;

pub use client::{peak_in_flight, run_scenario, RunOutput};
pub use error::BenchError;
pub use report::{compare, format_relative, BenchReport, Comparison, DeltaRow};
pub use trace::{load_trace, TraceColumns};
pub use workload::{RequestSample, Source, WorkloadSpec};
