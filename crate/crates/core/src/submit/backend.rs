use std::collections::HashMap;
use std::process::Stdio;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::process::Command;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("scheduler unavailable: {0}")]
    Unavailable(String),
    #[error("submission rejected: {0}")]
    Rejected(String),
}

/// Where rendered scripts go.
#[async_trait]
pub trait SchedulerBackend: Send + Sync {
    /// Submits `script` and returns the scheduler's job id.
    async fn submit(&self, template_name: &str, script: &str) -> Result<String, SchedulerError>;

    /// Cancels a job. Unknown ids are not an error.
    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError>;
}

/// Extracts the job id from batch-submit output, accepting both
/// `Submitted batch job 4242` and the machine-readable `4242[;cluster]`.
pub fn parse_submit_output(stdout: &str) -> Option<String> {
    for line in stdout.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Submitted batch job ") {
            let id = rest.split_whitespace().next()?;
            if !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) {
                return Some(id.to_string());
            }
        }
        let id = line.split(';').next().unwrap_or("");
        if !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) {
            return Some(id.to_string());
        }
    }
    None
}

/// Runs external commands, e.g. `sbatch` and `scancel`. The script is
/// written to the submit command's stdin. Submissions for the same template
/// are serialized.
pub struct CommandBackend {
    submit_command: Vec<String>,
    cancel_command: Vec<String>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl CommandBackend {
    pub fn new(submit_command: Vec<String>, cancel_command: Vec<String>) -> Self {
        Self {
            submit_command,
            cancel_command,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn slurm() -> Self {
        Self::new(vec!["sbatch".into()], vec!["scancel".into()])
    }

    fn lock_for(&self, template: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(template.to_string())
            .or_default()
            .clone()
    }

    fn command(argv: &[String]) -> Result<Command, SchedulerError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| SchedulerError::Unavailable("no command configured".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args).kill_on_drop(true);
        Ok(cmd)
    }
}

fn first_line(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).lines().next().unwrap_or("").trim().to_string()
}

#[async_trait]
impl SchedulerBackend for CommandBackend {
    async fn submit(&self, template_name: &str, script: &str) -> Result<String, SchedulerError> {
        let lock = self.lock_for(template_name);
        let _serialized = lock.lock().await;
        let mut child = Self::command(&self.submit_command)?
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SchedulerError::Unavailable(format!("{}: {e}", self.submit_command[0])))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin
                .write_all(script.as_bytes())
                .await
                .map_err(|e| SchedulerError::Unavailable(format!("writing script: {e}")))?;
        }
        let out = child
            .wait_with_output()
            .await
            .map_err(|e| SchedulerError::Unavailable(e.to_string()))?;
        if !out.status.success() {
            let reason = first_line(&out.stderr);
            return Err(SchedulerError::Rejected(if reason.is_empty() {
                format!("submit command exited with {}", out.status)
            } else {
                reason
            }));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        parse_submit_output(&stdout)
            .ok_or_else(|| SchedulerError::Unavailable(format!("unrecognized submit output {:?}", stdout.trim())))
    }

    async fn cancel(&self, scheduler_job_id: &str) -> Result<(), SchedulerError> {
        let out = Self::command(&self.cancel_command)?
            .arg(scheduler_job_id)
            .stdin(Stdio::null())
            .output()
            .await
            .map_err(|e| SchedulerError::Unavailable(format!("{}: {e}", self.cancel_command[0])))?;
        if out.status.success() {
            return Ok(());
        }
        let stderr = String::from_utf8_lossy(&out.stderr).to_lowercase();
        if stderr.contains("invalid job id") || stderr.contains("unknown job") {
            return Ok(());
        }
        Err(SchedulerError::Unavailable(first_line(&out.stderr)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_submit_output() {
        assert_eq!(parse_submit_output("Submitted batch job 4242\n").as_deref(), Some("4242"));
        assert_eq!(parse_submit_output("Submitted batch job 7 on cluster c1\n").as_deref(), Some("7"));
        assert_eq!(parse_submit_output("4243;cluster\n").as_deref(), Some("4243"));
        assert_eq!(parse_submit_output("warning: x\nSubmitted batch job 9\n").as_deref(), Some("9"));
        assert_eq!(parse_submit_output("sbatch: error\n"), None);
        assert_eq!(parse_submit_output(""), None);
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[tokio::test]
    async fn stub_command_returns_job_id() {
        let backend = CommandBackend::new(sh("cat > /dev/null; echo 'Submitted batch job 4242'"), sh("exit 0"));
        assert_eq!(backend.submit("t", "#!/bin/bash\n").await.unwrap(), "4242");
    }

    #[tokio::test]
    async fn script_arrives_on_stdin() {
        let backend = CommandBackend::new(
            sh("grep -q '^#SBATCH --gres=gpu:2$' && echo 'Submitted batch job 1'"),
            sh("exit 0"),
        );
        assert_eq!(backend.submit("t", "#!/bin/bash\n#SBATCH --gres=gpu:2\n").await.unwrap(), "1");
    }

    #[tokio::test]
    async fn failures_map_to_errors() {
        let backend = CommandBackend::new(
            sh("cat > /dev/null; echo 'sbatch: error: Batch job submission failed: resources' >&2; exit 1"),
            sh("echo 'scancel: error: Invalid job id specified' >&2; exit 1"),
        );
        assert_eq!(
            backend.submit("t", "x").await,
            Err(SchedulerError::Rejected("sbatch: error: Batch job submission failed: resources".into()))
        );
        assert_eq!(backend.cancel("99").await, Ok(()));

        let missing = CommandBackend::new(vec!["/nonexistent/sbatch".into()], vec!["/nonexistent/scancel".into()]);
        assert!(matches!(missing.submit("t", "x").await, Err(SchedulerError::Unavailable(_))));
        assert!(matches!(missing.cancel("1").await, Err(SchedulerError::Unavailable(_))));
    }
}
