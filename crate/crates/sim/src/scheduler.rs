//! A batch scheduler in miniature: a pool of nodes with a job capacity each,
//! and a FIFO of jobs waiting for a free slot.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use llmscale_core::submit::ScriptParameters;
use llmscale_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

const FIRST_JOB_ID: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    /// Jobs the node runs at once.
    pub capacity: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimJobState {
    Pending,
    Starting,
    Running,
    Cancelled,
    Failed,
}

impl SimJobState {
    pub fn holds_slot(self) -> bool {
        matches!(self, SimJobState::Starting | SimJobState::Running)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SimJobState::Cancelled | SimJobState::Failed)
    }

    fn may_become(self, next: SimJobState) -> bool {
        use SimJobState::*;
        matches!(
            (self, next),
            (Pending, Starting) | (Starting, Running) | (Pending | Starting | Running, Cancelled | Failed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimJob {
    pub id: String,
    pub node_id: Option<String>,
    pub startup_delay: Duration,
    pub state: SimJobState,
    pub script: String,
    pub params: ScriptParameters,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
}

/// A job that just got a node and is now starting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub job_id: String,
    pub node_id: String,
    pub startup_delay: Duration,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CancelOutcome {
    /// State before the cancel; `None` for unknown ids.
    pub previous: Option<SimJobState>,
    pub node_id: Option<String>,
    /// Waiting jobs that took the freed slot.
    pub placements: Vec<Placement>,
}

pub struct SimScheduler {
    nodes: Vec<NodeSpec>,
    queue_when_full: bool,
    jobs: BTreeMap<String, SimJob>,
    pending: VecDeque<String>,
    next_id: u64,
}

impl SimScheduler {
    pub fn new(nodes: Vec<NodeSpec>, queue_when_full: bool) -> Self {
        Self {
            nodes,
            queue_when_full,
            jobs: BTreeMap::new(),
            pending: VecDeque::new(),
            next_id: FIRST_JOB_ID,
        }
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn job(&self, id: &str) -> Option<&SimJob> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &SimJob> {
        self.jobs.values()
    }

    pub fn used_slots(&self, node: &str) -> u32 {
        self.jobs
            .values()
            .filter(|j| j.state.holds_slot() && j.node_id.as_deref() == Some(node))
            .count() as u32
    }

    fn free_node(&self) -> Option<String> {
        self.nodes
            .iter()
            .find(|n| self.used_slots(&n.name) < n.capacity)
            .map(|n| n.name.clone())
    }

    fn transition(&mut self, id: &str, to: SimJobState) -> Result<&mut SimJob, SimError> {
        let job = self
            .jobs
            .get_mut(id)
            .ok_or_else(|| SimError::UnknownJob(id.to_string()))?;
        if !job.state.may_become(to) {
            return Err(SimError::IllegalTransition {
                job: id.to_string(),
                from: job.state,
                to,
            });
        }
        job.state = to;
        Ok(job)
    }

    fn start_on(&mut self, id: &str, node: String, now: Timestamp) -> Placement {
        let job = self
            .transition(id, SimJobState::Starting)
            .expect("pending job can start");
        job.node_id = Some(node.clone());
        job.started_at = Some(now);
        Placement {
            job_id: id.to_string(),
            node_id: node,
            startup_delay: job.startup_delay,
        }
    }

    fn place_waiting(&mut self, now: Timestamp) -> Vec<Placement> {
        let mut out = Vec::new();
        while let Some(node) = self.free_node() {
            let Some(id) = self.pending.pop_front() else {
                break;
            };
            out.push(self.start_on(&id, node, now));
        }
        out
    }

    /// Accepts a rendered script. The job starts at once if a node has a
    /// free slot, otherwise it waits (or is rejected when queueing is off).
    pub fn submit(
        &mut self,
        script: &str,
        startup_delay: Duration,
        now: Timestamp,
    ) -> Result<(String, Option<Placement>), SimError> {
        let params = ScriptParameters::from_script(script)
            .ok_or_else(|| SimError::InvalidScript("missing LLMSCALE_* exports".into()))?;
        let node = self.free_node();
        if node.is_none() && !self.queue_when_full {
            return Err(SimError::SubmitRejected("resources".into()));
        }
        let id = self.next_id.to_string();
        self.next_id += 1;
        self.jobs.insert(
            id.clone(),
            SimJob {
                id: id.clone(),
                node_id: None,
                startup_delay,
                state: SimJobState::Pending,
                script: script.to_string(),
                params,
                submitted_at: now,
                started_at: None,
            },
        );
        let placement = match node {
            Some(node) => Some(self.start_on(&id, node, now)),
            None => {
                self.pending.push_back(id.clone());
                None
            }
        };
        Ok((id, placement))
    }

    /// The job if it is still starting, i.e. its registration should go out.
    pub fn startup_complete(&self, id: &str) -> Option<&SimJob> {
        self.jobs.get(id).filter(|j| j.state == SimJobState::Starting)
    }

    pub fn mark_running(&mut self, id: &str) -> Result<(), SimError> {
        self.transition(id, SimJobState::Running).map(|_| ())
    }

    /// Fails a job and hands its slot to the next waiting job.
    pub fn mark_failed(&mut self, id: &str, now: Timestamp) -> Result<Vec<Placement>, SimError> {
        self.transition(id, SimJobState::Failed)?;
        self.pending.retain(|p| p != id);
        Ok(self.place_waiting(now))
    }

    /// Cancels a job in any live state. Unknown or finished ids are accepted
    /// and change nothing.
    pub fn cancel(&mut self, id: &str, now: Timestamp) -> CancelOutcome {
        let Some(job) = self.jobs.get(id) else {
            return CancelOutcome {
                previous: None,
                node_id: None,
                placements: Vec::new(),
            };
        };
        let previous = job.state;
        let node_id = job.node_id.clone();
        if previous.is_terminal() {
            return CancelOutcome {
                previous: Some(previous),
                node_id,
                placements: Vec::new(),
            };
        }
        self.transition(id, SimJobState::Cancelled)
            .expect("live job can be cancelled");
        self.pending.retain(|p| p != id);
        CancelOutcome {
            previous: Some(previous),
            node_id,
            placements: self.place_waiting(now),
        }
    }
}
