use super::{Engine, Rollback, StateStore, StoreError, StoreStats, Tables, Transaction};

/// Volatile store for tests and simulation.
pub struct MemoryStore {
    engine: Engine,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self {
            engine: Engine::new(Tables::default()),
        }
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

impl StateStore for MemoryStore {
    fn run_transaction(
        &self,
        body: &mut dyn FnMut(&mut Transaction<'_>) -> Result<(), Rollback>,
    ) -> Result<(), StoreError> {
        self.engine.execute(body, &mut |_| Ok(()))
    }

    fn stats(&self) -> &StoreStats {
        self.engine.stats()
    }

    fn snapshot(&self) -> Tables {
        self.engine.snapshot()
    }
}
