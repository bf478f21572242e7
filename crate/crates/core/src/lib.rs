//! Rollout infrastructure for agents that act on screen-based environments:
//! per-replica state managers, a batched data server with a trajectory
//! store, and a capacity planner for sizing the fleet.

pub mod bench;
pub mod data_server;
pub mod env_backend;
pub mod planner;
pub mod protocol;
pub mod service;
pub mod state_manager;
pub mod task_flow;

pub use protocol::{Action, ActionPayload, EngineError, ErrorCode, Geometry, Observation, ReplicaId, StepResult};
pub use state_manager::ReplicaState;
pub use task_flow::TaskSpec;
