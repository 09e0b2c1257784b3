//! The control-plane services: the client-facing web gateway, the
//! registration endpoint gateway and the metrics gateway, plus the loops
//! that drive the job worker, endpoint worker and autoscaling evaluator.

pub mod app;
pub mod config;
pub mod endpoint_gateway;
pub mod error;
pub mod http_clients;
pub mod line_protocol;
pub mod loops;
pub mod metrics_gateway;
pub mod web_gateway;

pub use app::{AppError, ControlPlane, RunningControlPlane};
pub use config::{BackendKind, Config, ConfigError};
pub use error::{ApiError, ErrorBody};
