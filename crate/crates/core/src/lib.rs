//! Control-plane building blocks for serving LLM inference from batch-scheduled
//! jobs: the shared state store, request routing and authentication, the
//! scheduler adapter, the reconciliation and health loops, and the
//! observability/autoscaling surface.
//!
//! Every long-running loop is written as a step function that takes `now`
//! explicitly, so the same code runs against the wall clock in production and
//! against a manual clock in simulation.

pub mod auth;
pub mod clock;
pub mod health;
pub mod jobs;
pub mod model;
pub mod registration;
pub mod routing;
pub mod scaling;
pub mod store;
pub mod submit;
pub mod telemetry;
pub mod timing;

pub use clock::{Clock, ManualClock, Sleeper, SystemClock, Timestamp};
pub use model::{
    ConfigurationId, Endpoint, EndpointId, EndpointJob, EndpointJobId, JobState, KeyDigest,
    ModelConfiguration, Tenant, TenantAuthentication, TenantId,
};
pub use store::{FileStore, MemoryStore, StateStore, StoreError, StoreExt};
