use std::future::Future;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use llmscale_controlplane::{BackendKind, Config, ControlPlane, RunningControlPlane};
use llmscale_core::submit::SubmitSpec;
use llmscale_core::{EndpointJobId, JobState};
use llmscale_sim::{ModelSpec, NodeSpec, OutputLen};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

fn ms(n: u64) -> Duration {
    Duration::from_millis(n)
}

async fn free_port() -> u16 {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    l.local_addr().unwrap().port()
}

fn model() -> ModelSpec {
    let mut m = ModelSpec::new("m");
    m.min_instances = 1;
    m.desired_instances = 1;
    m.max_instances = 3;
    m.startup_delay = ms(300);
    m.post_submit_wait = ms(50);
    m.profile.ttft_base = ms(20);
    m.profile.tpot_base = ms(5);
    m.profile.output_len = OutputLen::Fixed { n: 4 };
    m
}

async fn config(backend: BackendKind) -> Config {
    let mut c = Config::default();
    let local = "127.0.0.1:0".parse().unwrap();
    c.gateway.listen = local;
    c.endpoint_gateway.listen = local;
    c.metrics_gateway.listen = local;
    c.endpoint_gateway.base_port = free_port().await;
    c.metrics_gateway.scrape_interval = ms(500);
    c.metrics_gateway.rules = Vec::new();
    c.job_worker.reconcile_interval = ms(150);
    c.endpoint_worker.sweep_interval = ms(150);
    c.scheduler.backend = backend;
    c.scheduler.seed = Some(0);
    c.scheduler.sim_nodes = vec![NodeSpec {
        name: "127.0.0.1".into(),
        capacity: 4,
    }];
    c.scheduler.templates_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../templates");
    c.secrets.internal_token = Some("internal".into());
    c.models = vec![model()];
    c
}

async fn eventually<F, Fut>(what: &str, limit: Duration, mut check: F)
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if check().await {
            return;
        }
        tokio::time::sleep(ms(50)).await;
    }
    panic!("timed out waiting for {what}");
}

async fn chat(cp: &RunningControlPlane, key: &str) -> reqwest::StatusCode {
    reqwest::Client::new()
        .post(format!("http://{}/v1/chat/completions", cp.gateway_addr))
        .bearer_auth(key)
        .json(&json!({"model": "m", "messages": [{"role": "user", "content": "hi"}], "max_tokens": 4}))
        .send()
        .await
        .unwrap()
        .status()
}

async fn sd_targets(cp: &RunningControlPlane) -> usize {
    let v: Value = reqwest::get(format!("http://{}/sd/targets", cp.metrics_gateway_addr))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    v.as_array().unwrap().len()
}

fn ready_jobs(cp: &RunningControlPlane) -> usize {
    cp.store.snapshot().jobs.values().filter(|j| j.state == JobState::Ready).count()
}

#[tokio::test]
async fn sim_backed_control_plane_serves_and_scales() {
    let plane = ControlPlane::build(config(BackendKind::Sim).await).unwrap();
    let key = plane.add_api_key("acme", "ci").unwrap();
    let cp = plane.start().await.unwrap();

    eventually("first endpoint to serve", Duration::from_secs(10), || async {
        chat(&cp, &key).await == reqwest::StatusCode::OK
    })
    .await;
    assert_eq!(sd_targets(&cp).await, 1);
    assert_eq!(chat(&cp, "sk-wrong").await, reqwest::StatusCode::UNAUTHORIZED);

    let scaled: Value = reqwest::Client::new()
        .post(format!("http://{}/internal/scale", cp.metrics_gateway_addr))
        .bearer_auth(&cp.internal_token)
        .json(&json!({"model_name": "m", "direction": "up"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(scaled["desired_instances"], 2);
    eventually("second endpoint ready", Duration::from_secs(10), || async { ready_jobs(&cp) == 2 }).await;
    assert_eq!(sd_targets(&cp).await, 2);
    let ports: std::collections::BTreeSet<u16> = cp.store.snapshot().endpoints.values().map(|e| e.port).collect();
    assert_eq!(ports.len(), 2);

    reqwest::Client::new()
        .post(format!("http://{}/internal/scale", cp.metrics_gateway_addr))
        .bearer_auth(&cp.internal_token)
        .json(&json!({"model_name": "m", "direction": "down"}))
        .send()
        .await
        .unwrap();
    eventually("scale down to one job", Duration::from_secs(10), || async {
        cp.store.snapshot().jobs.values().filter(|j| j.state.is_live()).count() == 1
    })
    .await;
    assert_eq!(chat(&cp, &key).await, reqwest::StatusCode::OK);

    let metrics = reqwest::get(format!("http://{}/metrics", cp.metrics_gateway_addr))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert!(metrics.contains("llmscale_registrations_total 2"), "{metrics}");
    cp.shutdown().await;
}

#[tokio::test]
async fn killed_server_is_replaced() {
    let plane = ControlPlane::build(config(BackendKind::Sim).await).unwrap();
    let key = plane.add_api_key("acme", "ci").unwrap();
    let cp = plane.start().await.unwrap();
    eventually("endpoint ready", Duration::from_secs(10), || async { ready_jobs(&cp) == 1 }).await;
    let first = cp.store.snapshot().jobs.values().next().unwrap().clone();
    assert!(cp.sim.as_ref().unwrap().kill(&first.scheduler_job_id));
    eventually("replacement ready", Duration::from_secs(15), || async {
        let jobs = cp.store.snapshot().jobs;
        !jobs.contains_key(&first.id) && jobs.values().any(|j| j.state == JobState::Ready)
    })
    .await;
    eventually("requests succeed again", Duration::from_secs(5), || async {
        chat(&cp, &key).await == reqwest::StatusCode::OK
    })
    .await;
    cp.shutdown().await;
}

#[tokio::test]
async fn command_backend_submits_rendered_templates() {
    let dir = tempfile::tempdir().unwrap();
    let scripts = dir.path().join("scripts");
    std::fs::create_dir(&scripts).unwrap();
    let mut c = config(BackendKind::Command).await;
    c.scheduler.command = vec![
        "sh".into(),
        "-c".into(),
        format!("cat > \"$(mktemp -p {})\"; echo 'Submitted batch job 4242'", scripts.display()),
    ];
    c.scheduler.cancel_command = vec!["true".into()];
    let cp = ControlPlane::build(c).unwrap().start().await.unwrap();

    eventually("a submission", Duration::from_secs(10), || async {
        cp.store.snapshot().jobs.values().any(|j| j.scheduler_job_id == "4242")
    })
    .await;
    let written: Vec<_> = std::fs::read_dir(&scripts).unwrap().collect();
    assert_eq!(written.len(), 1);
    let script = std::fs::read_to_string(written[0].as_ref().unwrap().path()).unwrap();
    assert!(script.starts_with("#!"));
    assert!(script.contains("#SBATCH"));
    assert!(script.contains("vllm serve"));
    assert!(script.contains("--served-model-name m"));
    assert!(script.contains(&cp.callback_url));
    cp.shutdown().await;
}

#[tokio::test]
async fn line_protocol_accepts_submissions() {
    let mut c = config(BackendKind::Sim).await;
    c.models[0].min_instances = 0;
    c.models[0].desired_instances = 0;
    c.scheduler.line_listen = Some("127.0.0.1:0".parse().unwrap());
    let cp = ControlPlane::build(c).unwrap().start().await.unwrap();
    let stream = TcpStream::connect(cp.line_addr.unwrap()).await.unwrap();
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();

    let spec = SubmitSpec {
        endpoint_job_id: EndpointJobId(77),
        model_name: "m".into(),
        model_version: "m".into(),
        template_name: "vllm".into(),
        capabilities: ["chat".to_string()].into(),
        callback_url: "http://127.0.0.1:9/cb".into(),
        callback_token: "tok".into(),
    };
    write.write_all(format!("{}\n", spec.encode()).as_bytes()).await.unwrap();
    let reply = lines.next_line().await.unwrap().unwrap();
    let id = reply.strip_prefix("OK ").expect(&reply).to_string();
    assert!(!id.is_empty());

    write.write_all(b"garbage\n").await.unwrap();
    assert!(lines.next_line().await.unwrap().unwrap().starts_with("ERR "));

    write.write_all(format!("CANCEL {id}\n").as_bytes()).await.unwrap();
    assert_eq!(lines.next_line().await.unwrap().unwrap(), "OK");
    cp.shutdown().await;
}

#[tokio::test]
async fn invalid_configuration_is_refused() {
    let mut c = config(BackendKind::Command).await;
    c.scheduler.templates_dir = PathBuf::from("/nonexistent");
    assert!(ControlPlane::build(c).is_err());

    let mut c = config(BackendKind::Sim).await;
    c.store.path = Some("/tmp/never-created.json".into());
    c.secrets.key_secret = None;
    assert!(ControlPlane::build(c).is_err());
}

#[tokio::test]
async fn file_store_keeps_keys_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(BackendKind::Sim).await;
    c.store.path = Some(dir.path().join("state.json"));
    c.secrets.key_secret = Some("persisted-secret".into());
    c.models[0].min_instances = 0;
    c.models[0].desired_instances = 0;
    let key = ControlPlane::build(c.clone()).unwrap().add_api_key("acme", "ci").unwrap();

    let cp = ControlPlane::build(c).unwrap().start().await.unwrap();
    let status = reqwest::Client::new()
        .get(format!("http://{}/v1/models", cp.gateway_addr))
        .bearer_auth(&key)
        .send()
        .await
        .unwrap()
        .status();
    assert_eq!(status, reqwest::StatusCode::OK);
    assert_eq!(cp.store.snapshot().configurations.len(), 1);
    cp.shutdown().await;
}
