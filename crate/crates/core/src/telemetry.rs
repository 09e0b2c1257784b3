//! The control plane's own counters, served on the metrics gateway's
//! `/metrics` route.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::scaling::exposition::ExpositionWriter;

#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn inc(&self) {
        self.add(1);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
pub struct ControlPlaneMetrics {
    pub requests_routed: Counter,
    pub upstream_failures: Counter,
    pub auth_cache_hits: Counter,
    pub auth_cache_misses: Counter,
    pub reconcile_submits: Counter,
    pub reconcile_cancels: Counter,
    pub registrations: Counter,
    pub endpoints_ready: Counter,
    pub endpoints_expired: Counter,
    pub scale_firings: Counter,
}

impl ControlPlaneMetrics {
    pub fn render(&self) -> String {
        let mut w = ExpositionWriter::default();
        let rows: [(&str, &str, &Counter); 10] = [
            ("llmscale_requests_routed_total", "Inference requests forwarded to an endpoint.", &self.requests_routed),
            ("llmscale_upstream_failures_total", "Forwarding attempts that could not reach the endpoint.", &self.upstream_failures),
            ("llmscale_auth_cache_hits_total", "API-key checks answered from the cache.", &self.auth_cache_hits),
            ("llmscale_auth_cache_misses_total", "API-key checks that went to the store.", &self.auth_cache_misses),
            ("llmscale_reconcile_submits_total", "Jobs submitted by the job worker.", &self.reconcile_submits),
            ("llmscale_reconcile_cancels_total", "Jobs cancelled by the job worker.", &self.reconcile_cancels),
            ("llmscale_registrations_total", "Successful endpoint registrations.", &self.registrations),
            ("llmscale_endpoints_ready_total", "Endpoints promoted to ready.", &self.endpoints_ready),
            ("llmscale_endpoints_expired_total", "Endpoint jobs expired and removed.", &self.endpoints_expired),
            ("llmscale_scale_firings_total", "Autoscaling rule firings.", &self.scale_firings),
        ];
        for (name, help, counter) in rows {
            w.counter(name, help, counter.get() as f64);
        }
        w.finish()
    }
}
