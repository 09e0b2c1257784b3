use std::time::Duration;

use llmscale_core::scaling::{ScaleCommand, ScaleDirection};
use llmscale_core::{JobState, StateStore, StoreExt};
use llmscale_sim::{Scenario, SimJobState, Simulation};

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const STEADY: &str = r#"
seed = 3
rules = []

[[nodes]]
name = "gpu-a"
capacity = 4

[[models]]
name = "chat"
min_instances = 1
desired_instances = 2
max_instances = 3
startup_delay = "45s"

[models.profile]
concurrency_capacity = 8
ttft_base = "120ms"
tpot_base = "30ms"
jitter = 0.0
output_len = { kind = "fixed", n = 11 }

[[load]]
model = "chat"
concurrency = 6
start_at = "2m"
stop_at = "5m"
"#;

fn ready(sim: &Simulation, model: &str) -> usize {
    sim.store().query_endpoints(model, true).unwrap().len()
}

#[test]
fn uncontended_requests_follow_the_profile_exactly() {
    let mut sim = Simulation::new(Scenario::from_toml(STEADY).unwrap()).unwrap();
    sim.advance(secs(6 * 60));
    assert_eq!(ready(&sim, "chat"), 2);
    let timings = sim.timings();
    assert!(timings.len() > 100, "{} requests", timings.len());
    for t in timings {
        assert!(t.success, "{t:?}");
        assert_eq!(t.output_len, 11);
        assert!((t.ttft() - 0.120).abs() < 1e-9, "{t:?}");
        assert!((t.e2el() - 0.420).abs() < 1e-9, "{t:?}");
        assert!(t.sent_at >= 120.0 && t.sent_at < 300.0);
    }
}

#[test]
fn a_crashed_server_is_replaced_and_traffic_recovers() {
    let mut sim = Simulation::new(Scenario::from_toml(STEADY).unwrap()).unwrap();
    sim.advance(secs(150));
    let victim = sim.store().query_endpoints("chat", true).unwrap()[0].clone();
    assert!(sim.kill_server(&victim.node_id, victim.port));
    let killed_at = sim.now().saturating_since(sim.start()).as_secs_f64();

    sim.advance(sim.scenario().intervals.sweep);
    assert!(!sim.store().snapshot().jobs.contains_key(&victim.endpoint_job_id));
    sim.advance(secs(90));
    assert_eq!(ready(&sim, "chat"), 2);
    let failed = sim.sim_jobs().iter().filter(|j| j.state == SimJobState::Failed).count();
    assert_eq!(failed, 1);
    assert!(sim
        .timings()
        .iter()
        .any(|t| t.success && t.sent_at > killed_at + 60.0));
}

#[test]
fn jobs_beyond_node_capacity_wait_for_a_slot() {
    let text = STEADY.replace("capacity = 4", "capacity = 1");
    let mut sim = Simulation::new(Scenario::from_toml(&text).unwrap()).unwrap();
    sim.advance(secs(100));
    let states: Vec<SimJobState> = sim.sim_jobs().iter().map(|j| j.state).collect();
    assert_eq!(states.iter().filter(|s| **s == SimJobState::Pending).count(), 1);
    assert_eq!(ready(&sim, "chat"), 1);
}

#[test]
fn scaling_down_keeps_the_ready_instance_serving() {
    let mut sim = Simulation::new(Scenario::from_toml(STEADY).unwrap()).unwrap();
    sim.advance(secs(100));
    let outcome = sim
        .controller()
        .apply(&ScaleCommand {
            model_name: "chat".into(),
            direction: ScaleDirection::Down,
            magnitude: 1,
            firing_id: None,
            reason: "test".into(),
        })
        .unwrap();
    assert_eq!((outcome.previous_desired, outcome.desired_instances), (2, 1));
    sim.advance(sim.scenario().intervals.reconcile);
    let jobs = sim.store().snapshot().jobs;
    assert_eq!(jobs.len(), 1);
    assert!(jobs.values().all(|j| j.state == JobState::Ready));
    assert_eq!(sim.sim_jobs().iter().filter(|j| j.state == SimJobState::Cancelled).count(), 1);
    sim.advance(secs(60));
    assert!(sim.timings().iter().all(|t| t.success));
}
