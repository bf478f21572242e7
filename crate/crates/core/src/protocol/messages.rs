//! Request and response records for the manager and data-server endpoints.

use serde::{Deserialize, Serialize};

use super::{Action, EngineError, Message, Observation, ReplicaId, StepResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplicaState {
    Unconfigured,
    Configuring,
    Ready,
    Busy,
    Evaluating,
    Crashed,
    Recovering,
}

impl ReplicaState {
    pub const ALL: [ReplicaState; 7] = [
        ReplicaState::Unconfigured,
        ReplicaState::Configuring,
        ReplicaState::Ready,
        ReplicaState::Busy,
        ReplicaState::Evaluating,
        ReplicaState::Crashed,
        ReplicaState::Recovering,
    ];

    pub fn can_transition(self, to: ReplicaState) -> bool {
        use ReplicaState::*;
        self != to
            && matches!(
                (self, to),
                (Unconfigured, Configuring)
                    | (Configuring, Ready)
                    | (Ready, Busy)
                    | (Busy, Ready)
                    | (Ready, Evaluating)
                    | (Evaluating, Ready)
                    | (_, Crashed)
                    | (Crashed, Recovering)
                    | (Recovering, Ready)
                    | (Recovering, Unconfigured)
            )
    }

    /// Crashed or recovering: the replica cannot serve requests.
    pub fn is_down(self) -> bool {
        matches!(self, ReplicaState::Crashed | ReplicaState::Recovering)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReplicaState::Unconfigured => "UNCONFIGURED",
            ReplicaState::Configuring => "CONFIGURING",
            ReplicaState::Ready => "READY",
            ReplicaState::Busy => "BUSY",
            ReplicaState::Evaluating => "EVALUATING",
            ReplicaState::Crashed => "CRASHED",
            ReplicaState::Recovering => "RECOVERING",
        }
    }
}

impl std::fmt::Display for ReplicaState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub replica_id: ReplicaId,
    pub state: ReplicaState,
    /// Unix milliseconds of the last successful liveness check.
    pub last_heartbeat: u64,
    pub consecutive_failures: u32,
    pub episodes_completed: u64,
    pub current_task: Option<String>,
    pub uptime_ms: u64,
}

impl Message for HealthReport {
    const TAG: &'static str = "health_report";
}

macro_rules! empty_request {
    ($name:ident, $tag:literal) => {
        #[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
        pub struct $name {}

        impl Message for $name {
            const TAG: &'static str = $tag;
        }
    };
}

empty_request!(ResetRequest, "reset");
empty_request!(EvaluateRequest, "evaluate");
empty_request!(HealthRequest, "health");
empty_request!(MetricsRequest, "metrics_request");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigureAck {
    pub replica_id: ReplicaId,
    pub state: ReplicaState,
}

impl Message for ConfigureAck {
    const TAG: &'static str = "configure_ack";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResult {
    pub score: f64,
}

impl Message for EvaluateResult {
    const TAG: &'static str = "evaluate_result";

    fn check(&self) -> Result<(), String> {
        if (0.0..=1.0).contains(&self.score) {
            Ok(())
        } else {
            Err(format!("score {} outside [0, 1]", self.score))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRequest {
    pub fault: crate::env_backend::FaultKind,
}

impl Message for FaultRequest {
    const TAG: &'static str = "fault";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub replica_id: ReplicaId,
}

impl Message for Ack {
    const TAG: &'static str = "ack";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplicaStatus {
    Idle,
    Assigned,
    Stepping,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub endpoint: String,
}

impl Message for RegisterRequest {
    const TAG: &'static str = "register";

    fn check(&self) -> Result<(), String> {
        if self.endpoint.trim().is_empty() {
            Err("endpoint is empty".into())
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub replica_id: ReplicaId,
    pub status: ReplicaStatus,
}

impl Message for RegisterResponse {
    const TAG: &'static str = "register_response";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResetRequest {
    pub task_ids: Vec<String>,
    pub count: usize,
    /// Overrides the server's default wait for idle replicas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

impl Message for BatchResetRequest {
    const TAG: &'static str = "batch_reset";

    fn check(&self) -> Result<(), String> {
        if self.task_ids.is_empty() {
            return Err("task_ids is empty".into());
        }
        if self.count == 0 {
            return Err("count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetItem {
    pub replica_id: ReplicaId,
    pub episode_id: String,
    pub task_id: String,
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResetResponse {
    pub items: Vec<ResetItem>,
}

impl Message for BatchResetResponse {
    const TAG: &'static str = "batch_reset_response";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepItem {
    pub replica_id: ReplicaId,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsyncStepRequest {
    pub items: Vec<StepItem>,
}

impl Message for AsyncStepRequest {
    const TAG: &'static str = "async_step";
}

/// Resolution of one ticket item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ItemOutcome {
    Ok(StepResult),
    Error(EngineError),
}

impl ItemOutcome {
    pub fn error_code(&self) -> Option<super::ErrorCode> {
        match self {
            ItemOutcome::Ok(_) => None,
            ItemOutcome::Error(e) => Some(e.code),
        }
    }
}

/// `resolved[i]` belongs to `items[i]`; a replica may appear twice in one
/// batch, so outcomes are positional rather than keyed by replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: String,
    pub submitted_at: u64,
    pub items: Vec<StepItem>,
    pub resolved: Vec<Option<ItemOutcome>>,
}

impl Ticket {
    pub fn is_resolved(&self) -> bool {
        self.resolved.iter().all(Option::is_some)
    }

    pub fn unresolved(&self) -> usize {
        self.resolved.iter().filter(|r| r.is_none()).count()
    }
}

impl Message for Ticket {
    const TAG: &'static str = "ticket";

    fn check(&self) -> Result<(), String> {
        if self.items.len() != self.resolved.len() {
            return Err("resolved must have one slot per item".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextBatchRequest {
    pub max_items: usize,
    pub timeout_ms: u64,
}

impl Message for NextBatchRequest {
    const TAG: &'static str = "next_batch";

    fn check(&self) -> Result<(), String> {
        if self.max_items == 0 {
            Err("max_items must be positive".into())
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadyItem {
    pub replica_id: ReplicaId,
    pub episode_id: String,
    pub observation: Observation,
    pub turn: u64,
    pub done: bool,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextBatchResponse {
    pub items: Vec<ReadyItem>,
}

impl Message for NextBatchResponse {
    const TAG: &'static str = "next_batch_response";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollRequest {
    pub ticket_id: String,
}

impl Message for PollRequest {
    const TAG: &'static str = "poll";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpisodeStatus {
    Complete,
    Aborted,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// SHA-256 hex of the screenshot the agent saw before acting.
    pub observation_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub action: Action,
    pub reward: f64,
    pub latency_ms: f64,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub task_id: String,
    pub replica_id: ReplicaId,
    pub instruction: String,
    pub turns: Vec<TurnRecord>,
    /// Screenshot after the last turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_observation_ref: Option<String>,
    pub final_score: f64,
    pub status: EpisodeStatus,
    pub started_at: u64,
    pub ended_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<EpisodeStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_final_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: usize,
}

impl TrajectoryFilter {
    pub fn matches(&self, record: &TrajectoryRecord) -> bool {
        self.task_id.as_ref().is_none_or(|t| *t == record.task_id)
            && self.status.is_none_or(|s| s == record.status)
            && self.min_final_score.is_none_or(|m| record.final_score >= m)
    }
}

impl Message for TrajectoryFilter {
    const TAG: &'static str = "trajectory_query";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPage {
    pub records: Vec<TrajectoryRecord>,
}

impl Message for TrajectoryPage {
    const TAG: &'static str = "trajectory_page";
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerMetrics {
    pub steps_per_sec: f64,
    pub mean_step_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub healthy_replicas: usize,
    pub total_replicas: usize,
    pub trajectories_per_min: f64,
}

impl Message for ServerMetrics {
    const TAG: &'static str = "server_metrics";
}
