use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::{SchedulerBackend, SchedulerError};
use super::spec::SubmitSpec;
use super::template::TemplateCatalog;
use crate::auth::generate_secret;

/// What the job worker and endpoint worker need from the scheduler side.
#[async_trait]
pub trait JobSubmitter: Send + Sync {
    async fn submit(&self, spec: &SubmitSpec) -> Result<String, SchedulerError>;
    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError>;
}

/// Renders templates and forwards them to a backend. Each submission gets a
/// fresh bearer token for its inference server.
pub struct SubmitService {
    catalog: TemplateCatalog,
    backend: Arc<dyn SchedulerBackend>,
    rng: Mutex<ChaCha8Rng>,
}

impl SubmitService {
    pub fn new(catalog: TemplateCatalog, backend: Arc<dyn SchedulerBackend>, seed: u64) -> Self {
        Self {
            catalog,
            backend,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn catalog(&self) -> &TemplateCatalog {
        &self.catalog
    }

    fn bearer_token(&self) -> String {
        let mut rng = self.rng.lock().unwrap_or_else(|p| p.into_inner());
        generate_secret("llmscale-", &mut *rng)
    }

    /// Handles one line of the text protocol: a submit string, or
    /// `CANCEL <id>`. Replies `OK [<id>]` or `ERR <reason>`.
    pub async fn handle_line(&self, line: &str) -> String {
        let line = line.trim();
        let reply = if let Some(id) = line.strip_prefix("CANCEL ") {
            self.cancel(id.trim()).await.map(|()| "OK".to_string())
        } else {
            match SubmitSpec::decode(line, &|t| self.catalog.contains(t)) {
                Ok(spec) => self.submit(&spec).await.map(|id| format!("OK {id}")),
                Err(e) => Err(SchedulerError::Rejected(e.to_string())),
            }
        };
        reply.unwrap_or_else(|e| format!("ERR {}", e.to_string().replace(['\r', '\n'], " ")))
    }
}

#[async_trait]
impl JobSubmitter for SubmitService {
    async fn submit(&self, spec: &SubmitSpec) -> Result<String, SchedulerError> {
        spec.validate().map_err(|e| SchedulerError::Rejected(e.to_string()))?;
        let script = self
            .catalog
            .render(spec, &self.bearer_token())
            .map_err(|e| SchedulerError::Rejected(e.to_string()))?;
        let id = self.backend.submit(&spec.template_name, &script).await?;
        if id.is_empty() {
            return Err(SchedulerError::Unavailable("backend returned an empty job id".into()));
        }
        tracing::info!(
            action = "scheduler_submit",
            endpoint_job_id = %spec.endpoint_job_id,
            model = %spec.model_name,
            template = %spec.template_name,
            scheduler_job_id = %id,
        );
        Ok(id)
    }

    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError> {
        self.backend.cancel(scheduler_job_id).await
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::model::EndpointJobId;
    use crate::submit::{BatchTemplate, ScriptParameters};

    #[derive(Default)]
    struct Recording {
        scripts: Mutex<Vec<String>>,
        cancelled: Mutex<Vec<String>>,
    }

    #[async_trait]
    impl SchedulerBackend for Recording {
        async fn submit(&self, _: &str, script: &str) -> Result<String, SchedulerError> {
            let mut s = self.scripts.lock().unwrap();
            s.push(script.to_string());
            Ok(format!("{}", 100 + s.len()))
        }

        async fn cancel(&self, id: &str) -> Result<(), SchedulerError> {
            self.cancelled.lock().unwrap().push(id.to_string());
            Ok(())
        }
    }

    fn service() -> (Arc<Recording>, SubmitService) {
        let backend = Arc::new(Recording::default());
        let catalog = TemplateCatalog::new([BatchTemplate::parse("t", "#!/bin/bash\nserve {{model_version}} --key {{bearer_token}}\n")]);
        (backend.clone(), SubmitService::new(catalog, backend, 0))
    }

    fn spec() -> SubmitSpec {
        SubmitSpec {
            endpoint_job_id: EndpointJobId(5),
            model_name: "m".into(),
            model_version: "v".into(),
            template_name: "t".into(),
            capabilities: ["chat".to_string()].into(),
            callback_url: "http://cb".into(),
            callback_token: "tok".into(),
        }
    }

    #[tokio::test]
    async fn line_protocol() {
        let (backend, svc) = service();
        assert_eq!(svc.handle_line(&spec().encode()).await, "OK 101");
        assert_eq!(svc.handle_line("CANCEL 101\n").await, "OK");
        assert!(svc.handle_line("1,m,v").await.starts_with("ERR submission rejected: malformed"));
        let mut unknown = spec();
        unknown.template_name = "nope".into();
        assert!(svc.handle_line(&unknown.encode()).await.contains("unknown template"));
        assert_eq!(backend.cancelled.lock().unwrap().as_slice(), ["101"]);
    }

    #[tokio::test]
    async fn each_submission_gets_its_own_bearer_token() {
        let (backend, svc) = service();
        svc.submit(&spec()).await.unwrap();
        svc.submit(&spec()).await.unwrap();
        let scripts = backend.scripts.lock().unwrap();
        let a = ScriptParameters::from_script(&scripts[0]).unwrap();
        let b = ScriptParameters::from_script(&scripts[1]).unwrap();
        assert_ne!(a.bearer_token, b.bearer_token);
        assert!(scripts[0].contains(&format!("--key {}", a.bearer_token)));
    }
}
