//! Closed-loop streaming client: keeps `concurrency` requests in flight and
//! records per-request timings on a monotonic clock.

use std::time::Instant;

use futures::stream::{self, StreamExt};
use llmscale_core::timing::{MetricsSummary, RequestTiming};
use serde_json::json;

use crate::error::BenchError;
use crate::sse::{classify, SseEvent, SseParser};
use crate::workload::{prompt, samples, RequestSample, WorkloadSpec};

/// Timings of one run, ordered by request index.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub timings: Vec<RequestTiming>,
    pub summary: MetricsSummary,
}

fn chat_url(target: &str) -> String {
    format!("{}/v1/chat/completions", target.trim_end_matches('/'))
}

fn request_body(spec: &WorkloadSpec, index: u64, sample: &RequestSample) -> serde_json::Value {
    json!({
        "model": spec.model,
        "messages": [{"role": "user", "content": prompt(spec.seed, index, sample.input_tokens)}],
        "max_tokens": sample.max_tokens,
        "stream": true,
        "ignore_eos": true,
        "stream_options": {"include_usage": true},
    })
}

/// Sends one streaming chat request. The first token is the first chunk
/// with non-empty content; the output length is the usage count when the
/// server reports one, else the number of content chunks.
pub async fn send_one(
    client: &reqwest::Client,
    spec: &WorkloadSpec,
    base: Instant,
    index: u64,
    sample: &RequestSample,
) -> RequestTiming {
    let now = || base.elapsed().as_secs_f64();
    let sent_at = now();
    let mut req = client.post(chat_url(&spec.target_url)).json(&request_body(spec, index, sample));
    if let Some(key) = &spec.api_key {
        req = req.bearer_auth(key);
    }
    let response = match req.send().await {
        Ok(r) => r,
        Err(e) => return RequestTiming::failure(index, sent_at, now(), e.to_string()),
    };
    let status = response.status();
    if !status.is_success() {
        let body = response.text().await.unwrap_or_default();
        return RequestTiming::failure(index, sent_at, now(), format!("HTTP {status}: {body}"));
    }
    let mut body = response.bytes_stream();
    let mut parser = SseParser::default();
    let (mut first, mut last) = (None, None);
    let mut content_chunks = 0u32;
    let mut usage = None;
    let mut done = false;
    while let Some(piece) = body.next().await {
        let bytes = match piece {
            Ok(b) => b,
            Err(e) => return RequestTiming::failure(index, sent_at, now(), format!("stream broke: {e}")),
        };
        let at = now();
        for event in parser.push(&bytes) {
            match event {
                SseEvent::Done => done = true,
                SseEvent::Data(data) => {
                    let info = classify(&data);
                    if info.has_content {
                        first.get_or_insert(at);
                        last = Some(at);
                        content_chunks += 1;
                    }
                    usage = info.completion_tokens.or(usage);
                }
            }
        }
    }
    match (first, last, done) {
        (Some(f), Some(l), true) => RequestTiming::success(index, sent_at, f, l, usage.unwrap_or(content_chunks).max(1)),
        (_, _, false) => RequestTiming::failure(index, sent_at, now(), "stream ended without [DONE]"),
        _ => RequestTiming::failure(index, sent_at, now(), "no tokens received"),
    }
}

/// One request before the measured run, so authentication is cached and
/// connections exist. Any failure means the target is not usable.
pub async fn warm_up(client: &reqwest::Client, spec: &WorkloadSpec, sample: &RequestSample) -> Result<(), BenchError> {
    let sample = RequestSample {
        max_tokens: 1,
        ..sample.clone()
    };
    let t = send_one(client, spec, Instant::now(), u64::MAX, &sample).await;
    match t.error {
        None => Ok(()),
        Some(e) => Err(BenchError::TargetUnreachable(format!("warm-up request to {} failed: {e}", spec.target_url))),
    }
}

pub fn client_for(spec: &WorkloadSpec) -> Result<reqwest::Client, BenchError> {
    reqwest::Client::builder()
        .pool_max_idle_per_host(spec.concurrency as usize)
        .build()
        .map_err(|e| BenchError::TargetUnreachable(e.to_string()))
}

/// Warm-up, then `total_requests` sends with `concurrency` in flight; each
/// completion starts the next send. The warm-up is not recorded.
pub async fn run_scenario(spec: &WorkloadSpec) -> Result<RunOutput, BenchError> {
    spec.validate()?;
    let samples = samples(spec)?;
    if samples.is_empty() {
        return Ok(RunOutput {
            timings: Vec::new(),
            summary: MetricsSummary::from_timings(&[]),
        });
    }
    let client = client_for(spec)?;
    warm_up(&client, spec, &samples[0]).await?;
    let timings = run_loaded(&client, spec, &samples).await;
    let summary = MetricsSummary::from_timings(&timings);
    Ok(RunOutput { timings, summary })
}

async fn run_loaded(client: &reqwest::Client, spec: &WorkloadSpec, samples: &[RequestSample]) -> Vec<RequestTiming> {
    let base = Instant::now();
    let sends: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| send_one(client, spec, base, i as u64, s))
        .collect();
    let mut timings: Vec<RequestTiming> = stream::iter(sends)
        .buffer_unordered(spec.concurrency as usize)
        .collect()
        .await;
    timings.sort_by_key(|t| t.index);
    timings
}

/// Largest number of requests in flight at any instant, from raw timings.
pub fn peak_in_flight(timings: &[RequestTiming]) -> usize {
    let mut edges: Vec<(f64, i32)> = timings
        .iter()
        .flat_map(|t| {
            let end = if t.success { t.last_token_at } else { t.first_token_at.max(t.last_token_at) };
            [(t.sent_at, 1), (end, -1)]
        })
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut level, mut peak) = (0i64, 0i64);
    for (_, d) in edges {
        level += i64::from(d);
        peak = peak.max(level);
    }
    peak as usize
}
