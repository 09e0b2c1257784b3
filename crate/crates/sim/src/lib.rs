//! Hermetic stand-ins for the GPU cluster: a batch scheduler that launches
//! mock inference servers, a streaming OpenAI-compatible mock server with a
//! FCFS capacity model, and a discrete-event engine that runs the whole
//! control plane under a manual clock.

pub mod clock;
pub mod engine;
pub mod error;
pub mod profile;
pub mod realtime;
pub mod scenario;
pub mod scheduler;
pub mod server;
pub mod server_model;

pub use clock::{ClockMode, SimClock};
pub use engine::{FiringRecord, Simulation};
pub use error::SimError;
pub use profile::{MockServerProfile, OutputLen};
pub use realtime::RealtimeSimBackend;
pub use scenario::{Intervals, LoadSpec, ModelSpec, Scenario};
pub use scheduler::{NodeSpec, SimJob, SimJobState, SimScheduler};
pub use server_model::{Admission, Gauges, MockServerModel, RequestId, ServerEvent};
pub use server::{MockServerConfig, MockServerHandle};
