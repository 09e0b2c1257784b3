mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::*;
use futures::StreamExt;
use llmscale_core::StateStore;
use serde_json::{json, Value};

const TTL: Duration = Duration::from_secs(60);

fn client() -> reqwest::Client {
    reqwest::Client::new()
}

async fn post_chat(gw: &Gateway, key: Option<&str>, body: &Value) -> reqwest::Response {
    let mut req = client().post(gw.url("/v1/chat/completions")).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    req.send().await.unwrap()
}

async fn error_code(resp: reqwest::Response) -> (u16, String) {
    let status = resp.status().as_u16();
    let body: Value = resp.json().await.unwrap();
    (status, body["code"].as_str().unwrap_or_default().to_string())
}

#[tokio::test]
async fn models_are_listed_for_authenticated_clients() {
    let store = seeded_store(&["beta", "alpha"]);
    let gw = spawn_gateway(store, TTL).await;
    let resp = client().get(gw.url("/v1/models")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    let resp = client().get(gw.url("/v1/models")).bearer_auth(API_KEY).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["object"], "list");
    let ids: Vec<&str> = body["data"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["alpha", "beta"]);
}

#[tokio::test]
async fn streamed_chat_is_relayed_to_done() {
    let store = seeded_store(&["m"]);
    let server = mock_server("m", "upstream-token", profile(4, 20, 5, 4)).await;
    add_endpoint(&store, "m", server.addr(), "upstream-token", true);
    let gw = spawn_gateway(store, TTL).await;
    let resp = post_chat(&gw, Some(API_KEY), &chat_body("m", true)).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let text = resp.text().await.unwrap();
    let data: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("data: ")).collect();
    assert_eq!(data.last(), Some(&"[DONE]"));
    let content: String = data
        .iter()
        .filter_map(|d| serde_json::from_str::<Value>(d).ok())
        .filter_map(|v| v["choices"][0]["delta"]["content"].as_str().map(str::to_string))
        .collect();
    assert!(!content.is_empty());
    assert_eq!(gw.metrics.requests_routed.get(), 1);
}

#[tokio::test]
async fn non_streaming_completion_is_relayed() {
    let store = seeded_store(&["m"]);
    let server = mock_server("m", "t", profile(4, 10, 5, 3)).await;
    add_endpoint(&store, "m", server.addr(), "t", true);
    let gw = spawn_gateway(store, TTL).await;
    let resp = client()
        .post(gw.url("/v1/completions"))
        .bearer_auth(API_KEY)
        .json(&json!({"model": "m", "prompt": "one two", "max_tokens": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["usage"]["completion_tokens"], 3);
    assert_eq!(body["object"], "text_completion");
}

#[tokio::test]
async fn client_errors_are_mapped() {
    let store = seeded_store(&["m", "idle"]);
    let server = mock_server("m", "t", profile(4, 10, 5, 3)).await;
    add_endpoint(&store, "m", server.addr(), "t", true);
    let gw = spawn_gateway(store, TTL).await;

    assert_eq!(error_code(post_chat(&gw, None, &chat_body("m", false)).await).await, (401, "missing_credentials".into()));
    assert_eq!(
        error_code(post_chat(&gw, Some("sk-wrong"), &chat_body("m", false)).await).await,
        (401, "unauthorized".into())
    );
    assert_eq!(
        error_code(post_chat(&gw, Some(API_KEY), &json!({"model": "m"})).await).await,
        (422, "invalid_request".into())
    );
    let resp = client()
        .post(gw.url("/v1/chat/completions"))
        .bearer_auth(API_KEY)
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        error_code(post_chat(&gw, Some(API_KEY), &chat_body("nope", false)).await).await,
        (404, "unknown_model".into())
    );
    assert_eq!(
        error_code(post_chat(&gw, Some(API_KEY), &chat_body("idle", false)).await).await,
        (424, "no_endpoint_ready".into())
    );
    assert_eq!(gw.metrics.requests_routed.get(), 0);
}

#[tokio::test]
async fn registered_but_unready_endpoints_are_not_used() {
    let store = seeded_store(&["m"]);
    let upstream = recorder(StatusCode::OK, "application/json", "{}").await;
    add_endpoint(&store, "m", upstream.addr, "t", false);
    let gw = spawn_gateway(store, TTL).await;
    let (status, code) = error_code(post_chat(&gw, Some(API_KEY), &chat_body("m", false)).await).await;
    assert_eq!((status, code.as_str()), (424, "no_endpoint_ready"));
    assert!(upstream.requests().is_empty());
}

#[tokio::test]
async fn upstream_errors_pass_through_unchanged() {
    let store = seeded_store(&["m"]);
    let upstream = recorder(StatusCode::BAD_REQUEST, "application/json", r#"{"error":{"message":"bad temperature"}}"#).await;
    add_endpoint(&store, "m", upstream.addr, "t", true);
    let gw = spawn_gateway(store, TTL).await;
    let resp = post_chat(&gw, Some(API_KEY), &chat_body("m", false)).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert!(resp.headers().get("x-upstream-secret").is_none());
    assert_eq!(resp.text().await.unwrap(), r#"{"error":{"message":"bad temperature"}}"#);
}

#[tokio::test]
async fn body_is_forwarded_verbatim_with_the_endpoint_token() {
    let store = seeded_store(&["m"]);
    let upstream = recorder(StatusCode::OK, "application/json", "{}").await;
    add_endpoint(&store, "m", upstream.addr, "endpoint-secret", true);
    let gw = spawn_gateway(store, TTL).await;
    let raw = r#"{"model":"m","messages":[{"role":"user","content":"x"}],"temperature":0.25,"top_p":0.5,"seed":42,"logit_bias":{"11":-100},"vendor_field":[1,2]}"#;
    let resp = client()
        .post(gw.url("/v1/chat/completions"))
        .bearer_auth(API_KEY)
        .header("content-type", "application/json")
        .body(raw)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let seen = upstream.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].body.as_ref(), raw.as_bytes());
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer endpoint-secret"));

    let resp = client()
        .post(gw.url("/v1/completions"))
        .bearer_auth(API_KEY)
        .json(&json!({"model": "m", "prompt": "p", "best_of": 3}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(upstream.requests()[1].path, "/v1/completions");
}

#[tokio::test]
async fn ready_endpoints_share_load_evenly() {
    let store = seeded_store(&["m"]);
    let a = recorder(StatusCode::OK, "application/json", "{}").await;
    let b = recorder(StatusCode::OK, "application/json", "{}").await;
    let c = recorder(StatusCode::OK, "application/json", "{}").await;
    for r in [&a, &b, &c] {
        add_endpoint(&store, "m", r.addr, "t", true);
    }
    let gw = spawn_gateway(store, TTL).await;
    for _ in 0..30 {
        assert_eq!(post_chat(&gw, Some(API_KEY), &chat_body("m", false)).await.status(), StatusCode::OK);
    }
    assert_eq!([a.requests().len(), b.requests().len(), c.requests().len()], [10, 10, 10]);
}

#[tokio::test]
async fn unreachable_endpoint_fails_over_and_triggers_a_recheck() {
    let store = seeded_store(&["m"]);
    let dead = dead_addr().await;
    let live = recorder(StatusCode::OK, "application/json", r#"{"ok":true}"#).await;
    add_endpoint(&store, "m", dead, "t", true);
    add_endpoint(&store, "m", live.addr, "t", true);
    let gw = spawn_gateway(store, TTL).await;
    let recheck = gw.recheck.clone();
    let notified = tokio::spawn(async move { recheck.notified().await });
    for _ in 0..4 {
        let resp = post_chat(&gw, Some(API_KEY), &chat_body("m", false)).await;
        assert_eq!(resp.status(), StatusCode::OK);
    }
    assert_eq!(live.requests().len(), 4);
    assert!((1..=4).contains(&gw.metrics.upstream_failures.get()));
    tokio::time::timeout(Duration::from_secs(1), notified).await.unwrap().unwrap();
}

#[tokio::test]
async fn all_endpoints_unreachable_is_bad_gateway() {
    let store = seeded_store(&["m"]);
    add_endpoint(&store, "m", dead_addr().await, "t", true);
    let gw = spawn_gateway(store, TTL).await;
    let (status, code) = error_code(post_chat(&gw, Some(API_KEY), &chat_body("m", false)).await).await;
    assert_eq!((status, code.as_str()), (502, "upstream_unreachable"));
    assert_eq!(gw.metrics.upstream_failures.get(), 1);
}

#[tokio::test]
async fn tokens_reach_the_client_while_generation_continues() {
    let store = seeded_store(&["m"]);
    let server = mock_server("m", "t", profile(1, 50, 150, 6)).await;
    add_endpoint(&store, "m", server.addr(), "t", true);
    let gw = spawn_gateway(store, TTL).await;
    let started = Instant::now();
    let resp = post_chat(&gw, Some(API_KEY), &json!({
        "model": "m",
        "messages": [{"role": "user", "content": "hi"}],
        "max_tokens": 6,
        "stream": true,
    }))
    .await;
    let mut stream = resp.bytes_stream();
    let mut first_content = None;
    let mut all = Vec::new();
    while let Some(chunk) = stream.next().await {
        let chunk = chunk.unwrap();
        if first_content.is_none() && String::from_utf8_lossy(&chunk).contains("\"content\":\"") {
            first_content = Some(started.elapsed());
        }
        all.extend_from_slice(&chunk);
    }
    let total = started.elapsed();
    let first = first_content.expect("content chunk");
    assert!(first < Duration::from_millis(400), "first token after {first:?}");
    assert!(total >= Duration::from_millis(800), "stream finished after {total:?}");
    assert!(String::from_utf8_lossy(&all).contains("data: [DONE]"));
}

#[tokio::test]
async fn one_store_lookup_per_key_within_the_ttl() {
    let store = seeded_store(&["m"]);
    let gw = spawn_gateway(store.clone(), TTL).await;
    let before = store.stats().authentication_lookups();
    for _ in 0..20 {
        client().get(gw.url("/v1/models")).bearer_auth(API_KEY).send().await.unwrap();
    }
    assert_eq!(store.stats().authentication_lookups() - before, 1);
    assert_eq!(gw.metrics.auth_cache_hits.get(), 19);
}
