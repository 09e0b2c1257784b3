mod common;

use std::collections::BTreeSet;

use common::*;
use llmscale_controlplane::endpoint_gateway::REGISTER_PATH;
use llmscale_core::{EndpointJobId, JobState, StateStore};
use serde_json::{json, Value};

async fn post(svc: &Service, token: Option<&str>, body: &Value) -> (u16, Value) {
    let mut req = reqwest::Client::new().post(svc.url(REGISTER_PATH)).json(body);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().await.unwrap();
    (resp.status().as_u16(), resp.json().await.unwrap_or(Value::Null))
}

#[tokio::test]
async fn registration_assigns_a_port_and_records_the_endpoint() {
    let store = seeded_store(&["m"]);
    let job = add_submitted_job(&store, "m");
    let svc = spawn_endpoint_gateway(store.clone(), 8000).await;
    let (status, body) = post(&svc, Some(&callback_token(job)), &registration(job, "node-a")).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body, json!({"assigned_port": 8000}));

    let tables = store.snapshot();
    let j = &tables.jobs[&job];
    assert_eq!(j.state, JobState::Registered);
    assert!(j.registered_at.is_some());
    let ep = tables.endpoints.values().find(|e| e.endpoint_job_id == job).unwrap();
    assert_eq!((ep.node_id.as_str(), ep.port, ep.model_name.as_str()), ("node-a", 8000, "m"));
    assert_eq!(ep.bearer_token, format!("server-token-{}", job.0));
    assert!(ep.ready_at.is_none());
    assert_eq!(svc.metrics.registrations.get(), 1);
}

#[tokio::test]
async fn registration_errors_are_mapped() {
    let store = seeded_store(&["m"]);
    let job = add_submitted_job(&store, "m");
    let svc = spawn_endpoint_gateway(store.clone(), 8000).await;
    let token = callback_token(job);

    assert_eq!(post(&svc, None, &registration(job, "n")).await.0, 401);
    assert_eq!(post(&svc, Some("forged"), &registration(job, "n")).await.0, 401);
    let other = callback_token(EndpointJobId(job.0 + 1));
    assert_eq!(post(&svc, Some(&other), &registration(job, "n")).await.0, 401);

    let ghost = EndpointJobId(999);
    let (status, body) = post(&svc, Some(&callback_token(ghost)), &registration(ghost, "n")).await;
    assert_eq!((status, body["code"].as_str()), (404, Some("unknown_job")));

    let mut empty_node = registration(job, "n");
    empty_node["node_id"] = json!(" ");
    assert_eq!(post(&svc, Some(&token), &empty_node).await.0, 422);
    assert_eq!(post(&svc, Some(&token), &json!({"endpoint_job_id": job.0})).await.0, 422);

    assert_eq!(post(&svc, Some(&token), &registration(job, "n")).await.0, 200);
    let (status, body) = post(&svc, Some(&token), &registration(job, "n")).await;
    assert_eq!((status, body["code"].as_str()), (409, Some("already_registered")));
    assert_eq!(store.snapshot().endpoints.len(), 1);
}

#[tokio::test]
async fn job_id_may_arrive_as_a_string() {
    let store = seeded_store(&["m"]);
    let job = add_submitted_job(&store, "m");
    let svc = spawn_endpoint_gateway(store, 9100).await;
    let mut body = registration(job, "n");
    body["endpoint_job_id"] = json!(job.0.to_string());
    assert_eq!(post(&svc, Some(&callback_token(job)), &body).await, (200, json!({"assigned_port": 9100})));
}

#[tokio::test]
async fn concurrent_registrations_get_distinct_consecutive_ports() {
    let store = seeded_store(&["m"]);
    let jobs: Vec<EndpointJobId> = (0..30).map(|_| add_submitted_job(&store, "m")).collect();
    let svc = spawn_endpoint_gateway(store.clone(), 8000).await;
    let sends = jobs.iter().map(|&j| {
        let body = registration(j, "shared-node");
        let token = callback_token(j);
        let svc = &svc;
        async move { post(svc, Some(&token), &body).await }
    });
    let results = futures::future::join_all(sends).await;
    let ports: BTreeSet<u64> = results
        .iter()
        .map(|(status, body)| {
            assert_eq!(*status, 200, "{body}");
            body["assigned_port"].as_u64().unwrap()
        })
        .collect();
    assert_eq!(ports, (8000..8030).collect());
}

#[tokio::test]
async fn ports_are_per_node() {
    let store = seeded_store(&["m"]);
    let a = add_submitted_job(&store, "m");
    let b = add_submitted_job(&store, "m");
    let svc = spawn_endpoint_gateway(store, 8000).await;
    assert_eq!(post(&svc, Some(&callback_token(a)), &registration(a, "n1")).await.1["assigned_port"], 8000);
    assert_eq!(post(&svc, Some(&callback_token(b)), &registration(b, "n2")).await.1["assigned_port"], 8000);
}
