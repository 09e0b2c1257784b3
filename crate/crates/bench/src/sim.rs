//! Runs the client load of a scenario against the deterministic simulator.

use std::time::Duration;

use llmscale_core::timing::RequestTiming;
use llmscale_sim::{Scenario, Simulation};

use crate::error::BenchError;

/// Advances a manual-clock simulation of `scenario` by `duration` and
/// returns the timings of the requests its load generated.
pub fn run_sim(scenario: Scenario, duration: Duration) -> Result<Vec<RequestTiming>, BenchError> {
    let mut sim = Simulation::new(scenario)?;
    sim.advance(duration);
    Ok(sim.timings().to_vec())
}
