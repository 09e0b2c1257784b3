use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use llmscale_core::{Clock, ManualClock, Sleeper, SystemClock, Timestamp};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    #[default]
    Manual,
}

/// The time source shared by every simulated component.
#[derive(Clone, Debug)]
pub enum SimClock {
    RealTime,
    Manual(Arc<ManualClock>),
}

impl SimClock {
    pub fn manual(start: Timestamp) -> Self {
        SimClock::Manual(Arc::new(ManualClock::new(start)))
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            SimClock::RealTime => ClockMode::RealTime,
            SimClock::Manual(_) => ClockMode::Manual,
        }
    }

    /// Moves a manual clock forward. Only the clock moves; components that
    /// schedule timers are driven by [`crate::Simulation::advance`].
    pub fn advance(&self, d: Duration) -> Result<Timestamp, SimError> {
        match self {
            SimClock::RealTime => Err(SimError::Mode),
            SimClock::Manual(c) => Ok(c.advance(d)),
        }
    }

    pub(crate) fn set(&self, t: Timestamp) -> Result<(), SimError> {
        match self {
            SimClock::RealTime => Err(SimError::Mode),
            SimClock::Manual(c) => {
                c.set(t);
                Ok(())
            }
        }
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        match self {
            SimClock::RealTime => SystemClock.now(),
            SimClock::Manual(c) => c.now(),
        }
    }
}

#[async_trait]
impl Sleeper for SimClock {
    async fn sleep(&self, d: Duration) {
        match self {
            SimClock::RealTime => SystemClock.sleep(d).await,
            SimClock::Manual(c) => c.sleep(d).await,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances() {
        let c = SimClock::manual(Timestamp::from_millis(5));
        assert_eq!(c.advance(Duration::ZERO), Ok(Timestamp::from_millis(5)));
        assert_eq!(c.advance(Duration::from_secs(1)), Ok(Timestamp::from_millis(1005)));
        assert_eq!(c.now(), Timestamp::from_millis(1005));
    }

    #[test]
    fn real_time_clock_refuses_advance() {
        assert_eq!(SimClock::RealTime.advance(Duration::from_secs(1)), Err(SimError::Mode));
        assert_eq!(SimClock::RealTime.mode(), ClockMode::RealTime);
    }
}
