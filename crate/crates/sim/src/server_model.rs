//! The queueing model behind every mock inference server: a fixed number of
//! decode slots, a first-come-first-served queue, and per-token timestamps
//! fixed at admission.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use llmscale_core::scaling::exposition::ExpositionWriter;
use llmscale_core::Timestamp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::profile::{MockServerProfile, OutputLen};

pub const QUEUE_TIME_METRIC: &str = "sim_queue_time_seconds";
pub const ACTIVE_METRIC: &str = "sim_active_requests";
pub const QUEUED_METRIC: &str = "sim_queued_requests";
pub const TOKENS_METRIC: &str = "sim_tokens_emitted_total";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Admission {
    pub id: RequestId,
    pub enqueued_at: Timestamp,
    pub admitted_at: Timestamp,
    /// When each output token is emitted; never empty.
    pub token_times: Vec<Timestamp>,
}

impl Admission {
    pub fn first_token_at(&self) -> Timestamp {
        self.token_times[0]
    }

    pub fn last_token_at(&self) -> Timestamp {
        *self.token_times.last().expect("at least one token")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServerEvent {
    Admitted(Admission),
    Completed { id: RequestId, at: Timestamp },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Gauges {
    pub queue_time_seconds: f64,
    pub active: usize,
    pub queued: usize,
    pub tokens_emitted: u64,
}

struct Queued {
    id: RequestId,
    enqueued_at: Timestamp,
    output_len: u32,
}

pub struct MockServerModel {
    profile: MockServerProfile,
    rng: ChaCha8Rng,
    active: BTreeMap<RequestId, Admission>,
    queue: VecDeque<Queued>,
    finished_tokens: u64,
    now: Timestamp,
}

impl MockServerModel {
    pub fn new(profile: MockServerProfile, seed: u64, now: Timestamp) -> Self {
        Self {
            profile,
            rng: ChaCha8Rng::seed_from_u64(seed),
            active: BTreeMap::new(),
            queue: VecDeque::new(),
            finished_tokens: 0,
            now,
        }
    }

    pub fn profile(&self) -> &MockServerProfile {
        &self.profile
    }

    /// Output length for a request: the profile's sample capped by
    /// `max_tokens`, or exactly `max_tokens` when end-of-sequence is ignored.
    pub fn sample_output_len(&mut self, max_tokens: Option<u64>, ignore_eos: bool) -> u32 {
        let cap = max_tokens.map(|m| m.clamp(1, u64::from(u32::MAX)) as u32);
        let sampled = match self.profile.output_len {
            OutputLen::Fixed { n } => n,
            OutputLen::Uniform { min, max } => self.rng.random_range(min..=max),
        };
        match (cap, ignore_eos) {
            (Some(c), true) => c,
            (Some(c), false) => sampled.min(c),
            (None, _) => sampled,
        }
        .max(1)
    }

    fn jittered(&mut self, base: Duration) -> Duration {
        if self.profile.jitter == 0.0 {
            return base;
        }
        let z: f64 = self.rng.sample(StandardNormal);
        let factor = (1.0 + self.profile.jitter * z).max(0.05);
        Duration::from_millis(((base.as_millis() as f64) * factor).round().max(1.0) as u64)
    }

    fn admit(&mut self, q: Queued, at: Timestamp, events: &mut Vec<ServerEvent>) {
        let mut t = at + self.jittered(self.profile.ttft_base);
        let mut token_times = Vec::with_capacity(q.output_len as usize);
        token_times.push(t);
        for _ in 1..q.output_len {
            t = t + self.jittered(self.profile.tpot_base);
            token_times.push(t);
        }
        let admission = Admission {
            id: q.id,
            enqueued_at: q.enqueued_at,
            admitted_at: at,
            token_times,
        };
        self.active.insert(q.id, admission.clone());
        events.push(ServerEvent::Admitted(admission));
    }

    fn fill_slots(&mut self, at: Timestamp, events: &mut Vec<ServerEvent>) {
        while self.active.len() < self.profile.concurrency_capacity as usize {
            let Some(q) = self.queue.pop_front() else {
                break;
            };
            self.admit(q, at, events);
        }
    }

    /// Processes every completion up to `now`, admitting queued requests at
    /// the instant a slot frees up.
    pub fn advance_to(&mut self, now: Timestamp) -> Vec<ServerEvent> {
        let mut events = Vec::new();
        loop {
            let next = self
                .active
                .values()
                .map(|a| (a.last_token_at(), a.id))
                .min();
            match next {
                Some((at, id)) if at <= now => {
                    let done = self.active.remove(&id).expect("present");
                    self.finished_tokens += done.token_times.len() as u64;
                    events.push(ServerEvent::Completed { id, at });
                    self.fill_slots(at, &mut events);
                }
                _ => break,
            }
        }
        self.now = self.now.max(now);
        events
    }

    /// Adds a request at `now`. The returned events include its admission if
    /// a slot was free, plus anything that happened up to `now`.
    pub fn submit(&mut self, id: RequestId, now: Timestamp, output_len: u32) -> Vec<ServerEvent> {
        let mut events = self.advance_to(now);
        self.queue.push_back(Queued {
            id,
            enqueued_at: now,
            output_len: output_len.max(1),
        });
        self.fill_slots(now, &mut events);
        events
    }

    /// Drops a request, e.g. because its client went away.
    pub fn cancel(&mut self, id: RequestId, now: Timestamp) -> Vec<ServerEvent> {
        let mut events = self.advance_to(now);
        if let Some(pos) = self.queue.iter().position(|q| q.id == id) {
            self.queue.remove(pos);
        } else if let Some(a) = self.active.remove(&id) {
            self.finished_tokens += a.token_times.iter().filter(|t| **t <= now).count() as u64;
            self.fill_slots(now, &mut events);
        }
        events
    }

    /// Earliest future completion, if anything is being decoded.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        self.active.values().map(Admission::last_token_at).min()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.queue.is_empty()
    }

    /// Gauges as of `now`; completions up to `now` should have been
    /// processed with [`MockServerModel::advance_to`].
    pub fn gauges(&self, now: Timestamp) -> Gauges {
        let in_flight: u64 = self
            .active
            .values()
            .map(|a| a.token_times.iter().filter(|t| **t <= now).count() as u64)
            .sum();
        Gauges {
            queue_time_seconds: self
                .queue
                .iter()
                .map(|q| now.saturating_since(q.enqueued_at).as_secs_f64())
                .fold(0.0, f64::max),
            active: self.active.len(),
            queued: self.queue.len(),
            tokens_emitted: self.finished_tokens + in_flight,
        }
    }

    pub fn metrics_text(&self, now: Timestamp) -> String {
        let g = self.gauges(now);
        let mut w = ExpositionWriter::default();
        w.gauge(QUEUE_TIME_METRIC, "Wait of the oldest queued request in seconds.", g.queue_time_seconds);
        w.gauge(ACTIVE_METRIC, "Requests currently being decoded.", g.active as f64);
        w.gauge(QUEUED_METRIC, "Requests waiting for a decode slot.", g.queued as f64);
        w.counter(TOKENS_METRIC, "Output tokens emitted.", g.tokens_emitted as f64);
        w.finish()
    }
}
