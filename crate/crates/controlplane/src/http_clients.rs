//! HTTP implementations of the health probe and the metrics scraper.

use std::time::Duration;

use async_trait::async_trait;
use llmscale_core::health::HealthProbe;
use llmscale_core::scaling::MetricsScraper;
use llmscale_core::Endpoint;

/// `GET /health`, healthy on 200 within the timeout.
pub struct HttpProbe {
    client: reqwest::Client,
    timeout: Duration,
}

impl HttpProbe {
    pub fn new(client: reqwest::Client, timeout: Duration) -> Self {
        Self { client, timeout }
    }
}

#[async_trait]
impl HealthProbe for HttpProbe {
    async fn probe(&self, endpoint: &Endpoint) -> bool {
        let url = format!("http://{}/health", endpoint.address());
        match self.client.get(url).timeout(self.timeout).send().await {
            Ok(r) => r.status() == reqwest::StatusCode::OK,
            Err(e) => {
                tracing::debug!(address = %endpoint.address(), error = %e, "health probe failed");
                false
            }
        }
    }
}

/// `GET /metrics` with the endpoint's bearer token.
pub struct HttpScraper {
    client: reqwest::Client,
    timeout: Duration,
}

impl HttpScraper {
    pub fn new(client: reqwest::Client, timeout: Duration) -> Self {
        Self { client, timeout }
    }
}

#[async_trait]
impl MetricsScraper for HttpScraper {
    async fn scrape(&self, endpoint: &Endpoint) -> Option<String> {
        let url = format!("http://{}/metrics", endpoint.address());
        let response = self
            .client
            .get(url)
            .bearer_auth(&endpoint.bearer_token)
            .timeout(self.timeout)
            .send()
            .await
            .ok()?;
        if !response.status().is_success() {
            return None;
        }
        response.text().await.ok()
    }
}
