use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::{StateStore, StoreError, StoreExt};

/// Label carrying the endpoint's bearer token, for scrape authorization via
/// relabeling. Prometheus drops `__meta_` labels after relabeling.
pub const BEARER_TOKEN_LABEL: &str = "__meta_llmscale_bearer_token";

/// One entry of a Prometheus HTTP service discovery response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetGroup {
    pub targets: Vec<String>,
    pub labels: BTreeMap<String, String>,
}

/// One group per ready endpoint, ordered by node and port.
pub fn discovery_targets(store: &dyn StateStore) -> Result<Vec<TargetGroup>, StoreError> {
    store.transact(|tx| {
        let mut ready: Vec<_> = tx.endpoints().filter(|e| e.is_ready()).cloned().collect();
        ready.sort_by(|a, b| (&a.node_id, a.port).cmp(&(&b.node_id, b.port)));
        Ok(ready
            .into_iter()
            .map(|e| {
                let scheduler_job_id = tx
                    .job(e.endpoint_job_id)
                    .map(|j| j.scheduler_job_id.clone())
                    .unwrap_or_default();
                TargetGroup {
                    targets: vec![e.address()],
                    labels: BTreeMap::from([
                        ("model_name".to_string(), e.model_name.clone()),
                        ("endpoint_job_id".to_string(), e.endpoint_job_id.to_string()),
                        ("scheduler_job_id".to_string(), scheduler_job_id),
                        (BEARER_TOKEN_LABEL.to_string(), e.bearer_token.clone()),
                    ]),
                }
            })
            .collect())
    })
}
