//! Per-replica manager: owns one backend, serializes the public lifecycle
//! operations on it, and watches over it so a dead or stuck replica is
//! re-created without outside help.

mod events;
mod manager;

use serde::{Deserialize, Serialize};

use crate::env_backend::SimEnvConfig;
use crate::protocol::{Geometry, ReplicaId};

pub use events::{CollectingSink, EventSink, ManagerEvent, NullSink, StdoutJsonSink};
pub use manager::{Launch, StateManager};
pub use crate::protocol::messages::{HealthReport, ReplicaState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Sim(SimEnvConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Sim(SimEnvConfig::default())
    }
}

fn default_listen() -> String {
    "127.0.0.1:7600".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub replica_id: ReplicaId,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub backend: BackendConfig,
    pub watchdog_interval_ms: u64,
    pub step_timeout_ms: u64,
    pub recovery_backoff_ms: Vec<u64>,
    #[serde(default)]
    pub geometry: Geometry,
}

impl ManagerConfig {
    pub fn new(replica_id: ReplicaId) -> Self {
        ManagerConfig {
            replica_id,
            listen: default_listen(),
            backend: BackendConfig::default(),
            watchdog_interval_ms: 100,
            step_timeout_ms: 5_000,
            recovery_backoff_ms: vec![100, 200, 400],
            geometry: Geometry::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.watchdog_interval_ms < 10 {
            return Err(format!("watchdog_interval_ms must be at least 10 (got {})", self.watchdog_interval_ms));
        }
        if self.step_timeout_ms == 0 {
            return Err("step_timeout_ms must be positive".into());
        }
        if self.recovery_backoff_ms.is_empty() {
            return Err("recovery_backoff_ms is empty".into());
        }
        if self.recovery_backoff_ms.contains(&0) {
            return Err("recovery_backoff_ms entries must be positive".into());
        }
        if self.recovery_backoff_ms.windows(2).any(|w| w[1] < w[0]) {
            return Err("recovery_backoff_ms must be non-decreasing".into());
        }
        if self.geometry.width == 0 || self.geometry.height == 0 {
            return Err("geometry must be positive".into());
        }
        let BackendConfig::Sim(sim) = &self.backend;
        sim.validate()
    }

    /// Sim backend settings with the manager's screen geometry applied.
    pub fn sim_config(&self) -> SimEnvConfig {
        let BackendConfig::Sim(sim) = &self.backend;
        SimEnvConfig { geometry: self.geometry, ..sim.clone() }
    }
}
