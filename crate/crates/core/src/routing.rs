//! Request validation and endpoint selection for the client gateway.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{Endpoint, EndpointId};
use crate::store::{StateStore, StoreError, StoreExt};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceKind {
    Chat,
    Completion,
}

impl InferenceKind {
    pub fn path(self) -> &'static str {
        match self {
            InferenceKind::Chat => "/v1/chat/completions",
            InferenceKind::Completion => "/v1/completions",
        }
    }
}

/// A validated OpenAI-style request. The original object is kept whole so
/// that unknown fields reach the upstream untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceRequest {
    pub kind: InferenceKind,
    pub model: String,
    pub stream: bool,
    pub body: Map<String, Value>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("request body is not valid JSON: {0}")]
    NotJson(String),
    #[error("request body must be a JSON object")]
    NotAnObject,
    #[error("field `{0}` is required")]
    Missing(&'static str),
    #[error("field `{field}` must be {expected}")]
    WrongType { field: &'static str, expected: &'static str },
}

impl InferenceRequest {
    pub fn parse(kind: InferenceKind, raw: &[u8]) -> Result<Self, ValidationError> {
        let value: Value = serde_json::from_slice(raw).map_err(|e| ValidationError::NotJson(e.to_string()))?;
        Self::from_value(kind, value)
    }

    pub fn from_value(kind: InferenceKind, value: Value) -> Result<Self, ValidationError> {
        let Value::Object(body) = value else {
            return Err(ValidationError::NotAnObject);
        };
        let model = match body.get("model") {
            None | Some(Value::Null) => return Err(ValidationError::Missing("model")),
            Some(Value::String(s)) if s.is_empty() => return Err(ValidationError::Missing("model")),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(ValidationError::WrongType {
                    field: "model",
                    expected: "a string",
                })
            }
        };
        let stream = match body.get("stream") {
            None | Some(Value::Null) => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                return Err(ValidationError::WrongType {
                    field: "stream",
                    expected: "a boolean",
                })
            }
        };
        match kind {
            InferenceKind::Chat => match body.get("messages") {
                None | Some(Value::Null) => return Err(ValidationError::Missing("messages")),
                Some(Value::Array(m)) if m.is_empty() => return Err(ValidationError::Missing("messages")),
                Some(Value::Array(m)) => {
                    if !m.iter().all(|msg| msg.get("role").is_some_and(Value::is_string)) {
                        return Err(ValidationError::WrongType {
                            field: "messages",
                            expected: "a list of objects with a string `role`",
                        });
                    }
                }
                Some(_) => {
                    return Err(ValidationError::WrongType {
                        field: "messages",
                        expected: "an array",
                    })
                }
            },
            InferenceKind::Completion => match body.get("prompt") {
                None | Some(Value::Null) => return Err(ValidationError::Missing("prompt")),
                Some(Value::String(_) | Value::Array(_)) => {}
                Some(_) => {
                    return Err(ValidationError::WrongType {
                        field: "prompt",
                        expected: "a string or an array",
                    })
                }
            },
        }
        for field in ["max_tokens", "max_completion_tokens"] {
            if let Some(v) = body.get(field) {
                if !(v.is_null() || v.is_u64()) {
                    return Err(ValidationError::WrongType {
                        field,
                        expected: "a non-negative integer",
                    });
                }
            }
        }
        Ok(Self {
            kind,
            model,
            stream,
            body,
        })
    }

    /// Requested output cap, if any.
    pub fn max_tokens(&self) -> Option<u64> {
        self.body
            .get("max_completion_tokens")
            .or_else(|| self.body.get("max_tokens"))
            .and_then(Value::as_u64)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    /// The model is configured or has jobs, but nothing is ready yet.
    #[error("no endpoint for model {0:?} is ready yet")]
    NoEndpointReady(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Round-robin selection over the ready endpoints of each model.
pub struct Router {
    store: Arc<dyn StateStore>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl Router {
    pub fn new(store: Arc<dyn StateStore>) -> Self {
        Self {
            store,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn select_endpoint(&self, model: &str) -> Result<Endpoint, RouteError> {
        self.select_excluding(model, &[])
    }

    /// Like [`Router::select_endpoint`], skipping endpoints already tried.
    pub fn select_excluding(&self, model: &str, exclude: &[EndpointId]) -> Result<Endpoint, RouteError> {
        let (ready, known) = self.store.transact(|tx| {
            let ready: Vec<Endpoint> = tx
                .query_endpoints(model, true)
                .into_iter()
                .filter(|e| !exclude.contains(&e.id))
                .collect();
            if !ready.is_empty() {
                return Ok::<_, StoreError>((ready, true));
            }
            let has_endpoints = tx.endpoints().any(|e| e.model_name == model);
            let config_ids: Vec<_> = tx
                .configurations()
                .filter(|c| c.model_name == model)
                .map(|c| c.id)
                .collect();
            let has_jobs = tx
                .jobs()
                .any(|j| j.state.is_live() && config_ids.contains(&j.configuration_id));
            let enabled = tx.enabled_configuration_for(model).is_some();
            Ok((ready, has_endpoints || has_jobs || enabled))
        })?;
        if ready.is_empty() {
            return Err(if known {
                RouteError::NoEndpointReady(model.to_string())
            } else {
                RouteError::UnknownModel(model.to_string())
            });
        }
        let mut cursors = self.cursors.lock().unwrap_or_else(|p| p.into_inner());
        let cursor = cursors.entry(model.to_string()).or_insert(0);
        let chosen = ready[*cursor % ready.len()].clone();
        *cursor = cursor.wrapping_add(1);
        Ok(chosen)
    }

    /// Model names of enabled configurations, sorted.
    pub fn list_models(&self) -> Result<Vec<String>, StoreError> {
        self.store.transact(|tx| {
            let mut names: Vec<String> = tx
                .configurations()
                .filter(|c| c.enabled)
                .map(|c| c.model_name.clone())
                .collect();
            names.sort();
            Ok(names)
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use serde_json::json;

    use super::*;
    use crate::clock::Timestamp;
    use crate::model::{ConfigurationId, EndpointJob, EndpointJobId, ModelConfiguration};
    use crate::store::MemoryStore;

    fn ts(ms: u64) -> Timestamp {
        Timestamp::from_millis(ms)
    }

    fn add_endpoint(store: &MemoryStore, n: u64, model: &str, cfg: u64, ready: bool) {
        store
            .transact(|tx| {
                let mut job = EndpointJob::submitted(EndpointJobId(100 + n), ConfigurationId(cfg), format!("s{n}"), ts(0));
                job.registered_at = Some(ts(1));
                job.state = crate::model::JobState::Registered;
                if ready {
                    job.ready_at = Some(ts(2));
                    job.state = crate::model::JobState::Ready;
                }
                tx.insert_job(job)?;
                tx.insert_endpoint(Endpoint {
                    id: EndpointId(200 + n),
                    endpoint_job_id: EndpointJobId(100 + n),
                    node_id: format!("n{n}"),
                    port: 8000,
                    model_name: model.into(),
                    capabilities: BTreeSet::new(),
                    bearer_token: "t".into(),
                    ready_at: ready.then(|| ts(2)),
                })
            })
            .unwrap();
    }

    fn store_with(models: &[(&str, u64)]) -> Arc<MemoryStore> {
        let store = Arc::new(MemoryStore::new());
        store
            .transact(|tx| {
                for (m, id) in models {
                    tx.insert_configuration(ModelConfiguration::new(ConfigurationId(*id), *m, "t"))?;
                }
                Ok::<_, StoreError>(())
            })
            .unwrap();
        store
    }

    #[test]
    fn single_ready_endpoint() {
        let store = store_with(&[("m", 1)]);
        add_endpoint(&store, 1, "m", 1, true);
        let router = Router::new(store);
        assert_eq!(router.select_endpoint("m").unwrap().id, EndpointId(201));
    }

    #[test]
    fn round_robin_alternates() {
        let store = store_with(&[("m", 1)]);
        add_endpoint(&store, 1, "m", 1, true);
        add_endpoint(&store, 2, "m", 1, true);
        let router = Router::new(store);
        let picks: Vec<u64> = (0..4).map(|_| router.select_endpoint("m").unwrap().id.0).collect();
        assert_eq!(picks, vec![201, 202, 201, 202]);
    }

    #[test]
    fn distinguishes_not_ready_from_unknown() {
        let store = store_with(&[("m", 1)]);
        store
            .transact(|tx| tx.insert_job(EndpointJob::submitted(EndpointJobId(9), ConfigurationId(1), "s", ts(0))))
            .unwrap();
        add_endpoint(&store, 1, "m", 1, false);
        let router = Router::new(store);
        assert_eq!(router.select_endpoint("m"), Err(RouteError::NoEndpointReady("m".into())));
        assert_eq!(router.select_endpoint("other"), Err(RouteError::UnknownModel("other".into())));
    }

    #[test]
    fn exclusion_skips_failed_endpoint() {
        let store = store_with(&[("m", 1)]);
        add_endpoint(&store, 1, "m", 1, true);
        add_endpoint(&store, 2, "m", 1, true);
        let router = Router::new(store);
        for _ in 0..3 {
            assert_eq!(router.select_excluding("m", &[EndpointId(201)]).unwrap().id, EndpointId(202));
        }
        assert!(matches!(
            router.select_excluding("m", &[EndpointId(201), EndpointId(202)]),
            Err(RouteError::NoEndpointReady(_))
        ));
    }

    #[test]
    fn lists_enabled_models() {
        let store = store_with(&[("b", 1), ("a", 2)]);
        let router = Router::new(store);
        assert_eq!(router.list_models().unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn validation() {
        let chat = |v| InferenceRequest::from_value(InferenceKind::Chat, v);
        let ok = chat(json!({"model": "m", "messages": [{"role": "user", "content": "hi"}], "stream": true, "x_custom": 1})).unwrap();
        assert!(ok.stream);
        assert_eq!(ok.body["x_custom"], 1);
        assert_eq!(chat(json!({"model": "", "messages": [{"role": "user"}]})), Err(ValidationError::Missing("model")));
        assert_eq!(chat(json!({"model": "m"})), Err(ValidationError::Missing("messages")));
        assert!(chat(json!({"model": "m", "messages": [{"role": "user"}], "stream": "yes"})).is_err());
        let completion = InferenceRequest::from_value(InferenceKind::Completion, json!({"model": "m", "prompt": "p", "max_tokens": 7})).unwrap();
        assert!(!completion.stream);
        assert_eq!(completion.max_tokens(), Some(7));
        assert_eq!(
            InferenceRequest::parse(InferenceKind::Completion, b"[1]"),
            Err(ValidationError::NotAnObject)
        );
    }

    proptest::proptest! {
        #[test]
        fn round_robin_is_fair(m in 1u64..6, k in 1usize..8) {
            let store = store_with(&[("m", 1)]);
            for n in 0..m {
                add_endpoint(&store, n, "m", 1, true);
            }
            let router = Router::new(store);
            let mut counts = HashMap::new();
            for _ in 0..(k * m as usize) {
                *counts.entry(router.select_endpoint("m").unwrap().id).or_insert(0usize) += 1;
            }
            proptest::prop_assert_eq!(counts.len(), m as usize);
            proptest::prop_assert!(counts.values().all(|c| *c == k));
        }
    }
}
