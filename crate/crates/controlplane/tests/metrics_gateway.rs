mod common;

use common::*;
use llmscale_controlplane::metrics_gateway::EXPOSITION_CONTENT_TYPE;
use llmscale_core::{StoreError, StoreExt};
use serde_json::{json, Value};

async fn scale(svc: &Service, token: Option<&str>, body: Value) -> (u16, Value) {
    let mut req = reqwest::Client::new().post(svc.url("/internal/scale")).json(&body);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().await.unwrap();
    (resp.status().as_u16(), resp.json().await.unwrap_or(Value::Null))
}

fn desired(store: &llmscale_core::MemoryStore, model: &str) -> u32 {
    store
        .transact(|tx| Ok::<_, StoreError>(tx.enabled_configuration_for(model).unwrap().desired_instances))
        .unwrap()
}

fn set_bounds(store: &llmscale_core::MemoryStore, model: &str, min: u32, desired: u32, max: u32) {
    store
        .transact(|tx| {
            let c = tx.enabled_configuration_for(model).unwrap().clone();
            tx.update_configuration(c.with_instances(min, desired, max))
        })
        .unwrap();
}

#[tokio::test]
async fn discovery_lists_ready_endpoints_in_http_sd_form() {
    let store = seeded_store(&["m"]);
    let svc = spawn_metrics_gateway(store.clone()).await;
    let validator = sd_validator();
    let get = || async { reqwest::get(svc.url("/sd/targets")).await.unwrap().json::<Value>().await.unwrap() };

    let empty = get().await;
    assert_eq!(empty, json!([]));
    assert!(validator.is_valid(&empty));

    add_endpoint(&store, "m", "127.0.0.1:9001".parse().unwrap(), "tok", true);
    add_endpoint(&store, "m", "127.0.0.1:9002".parse().unwrap(), "tok", false);
    let one = get().await;
    assert!(validator.is_valid(&one), "{one}");
    assert_eq!(one.as_array().unwrap().len(), 1);
    assert_eq!(one[0]["targets"], json!(["127.0.0.1:9001"]));
    assert_eq!(one[0]["labels"]["model_name"], "m");
    assert_eq!(one[0]["labels"]["__meta_llmscale_bearer_token"], "tok");
}

#[tokio::test]
async fn schema_rejects_malformed_groups() {
    let validator = sd_validator();
    assert!(!validator.is_valid(&json!({"targets": []})));
    assert!(!validator.is_valid(&json!([{"labels": {}}])));
    assert!(!validator.is_valid(&json!([{"targets": ["h:1"], "labels": {"bad-name": "x"}}])));
    assert!(!validator.is_valid(&json!([{"targets": ["h:1"], "labels": {"n": 1}}])));
    assert!(validator.is_valid(&json!([{"targets": ["h:1"], "labels": {"n": "1"}}])));
}

#[tokio::test]
async fn scale_webhook_requires_the_internal_token() {
    let store = seeded_store(&["m"]);
    let svc = spawn_metrics_gateway(store.clone()).await;
    let cmd = json!({"model_name": "m", "direction": "up"});
    assert_eq!(scale(&svc, None, cmd.clone()).await.0, 401);
    assert_eq!(scale(&svc, Some("nope"), cmd).await.0, 401);
    assert_eq!(desired(&store, "m"), 0);
}

#[tokio::test]
async fn scale_webhook_moves_desired_within_bounds() {
    let store = seeded_store(&["m"]);
    set_bounds(&store, "m", 1, 1, 3);
    let svc = spawn_metrics_gateway(store.clone()).await;
    let t = Some(INTERNAL_TOKEN);

    let (status, out) = scale(&svc, t, json!({"model_name": "m", "direction": "up", "reason": "queue"})).await;
    assert_eq!(status, 200);
    assert_eq!(out["previous_desired"], 1);
    assert_eq!(out["desired_instances"], 2);
    assert_eq!(out["clamped"], false);

    let (_, out) = scale(&svc, t, json!({"model_name": "m", "direction": "up", "magnitude": 5})).await;
    assert_eq!((out["desired_instances"].as_u64(), out["clamped"].as_bool()), (Some(3), Some(true)));
    let (_, out) = scale(&svc, t, json!({"model_name": "m", "direction": "down", "magnitude": 9})).await;
    assert_eq!((out["desired_instances"].as_u64(), out["clamped"].as_bool()), (Some(1), Some(true)));
    assert_eq!(desired(&store, "m"), 1);
}

#[tokio::test]
async fn repeated_firing_ids_apply_once() {
    let store = seeded_store(&["m"]);
    set_bounds(&store, "m", 0, 1, 5);
    let svc = spawn_metrics_gateway(store.clone()).await;
    let cmd = json!({"model_name": "m", "direction": "up", "firing_id": "alert-7"});
    let (_, first) = scale(&svc, Some(INTERNAL_TOKEN), cmd.clone()).await;
    let (_, again) = scale(&svc, Some(INTERNAL_TOKEN), cmd).await;
    assert_eq!(first["desired_instances"], 2);
    assert_eq!(again["desired_instances"], 2);
    assert_eq!(again["duplicate"], true);
    assert_eq!(desired(&store, "m"), 2);
}

#[tokio::test]
async fn scale_webhook_rejects_bad_payloads() {
    let store = seeded_store(&["m"]);
    let svc = spawn_metrics_gateway(store).await;
    let t = Some(INTERNAL_TOKEN);
    let (status, body) = scale(&svc, t, json!({"model_name": "ghost", "direction": "up"})).await;
    assert_eq!((status, body["code"].as_str()), (404, Some("unknown_model")));
    assert_eq!(scale(&svc, t, json!({"model_name": "m", "direction": "sideways"})).await.0, 422);
    assert_eq!(scale(&svc, t, json!({"model_name": "m", "direction": "up", "magnitude": 0})).await.0, 422);
    assert_eq!(scale(&svc, t, json!({"direction": "up"})).await.0, 422);
}

#[tokio::test]
async fn control_plane_metrics_are_exposed() {
    let store = seeded_store(&["m"]);
    set_bounds(&store, "m", 0, 1, 5);
    let svc = spawn_metrics_gateway(store).await;
    scale(&svc, Some(INTERNAL_TOKEN), json!({"model_name": "m", "direction": "up"})).await;
    let resp = reqwest::get(svc.url("/metrics")).await.unwrap();
    assert_eq!(resp.headers()["content-type"], EXPOSITION_CONTENT_TYPE);
    let text = resp.text().await.unwrap();
    assert!(text.contains("# TYPE llmscale_scale_firings_total counter"));
    assert!(text.lines().any(|l| l == "llmscale_scale_firings_total 1"), "{text}");

    let series: Value = reqwest::get(svc.url("/debug/series")).await.unwrap().json().await.unwrap();
    assert_eq!(series, json!([]));
}
