use serde::{Deserialize, Serialize};

use super::Message;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ReplicaBusy,
    ReplicaCrashed,
    ReplicaRecovering,
    EpisodeDone,
    UnknownReplica,
    UnknownTask,
    UnknownTicket,
    MalformedMessage,
    EvaluatorFailure,
    Timeout,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ReplicaBusy => "REPLICA_BUSY",
            ErrorCode::ReplicaCrashed => "REPLICA_CRASHED",
            ErrorCode::ReplicaRecovering => "REPLICA_RECOVERING",
            ErrorCode::EpisodeDone => "EPISODE_DONE",
            ErrorCode::UnknownReplica => "UNKNOWN_REPLICA",
            ErrorCode::UnknownTask => "UNKNOWN_TASK",
            ErrorCode::UnknownTicket => "UNKNOWN_TICKET",
            ErrorCode::MalformedMessage => "MALFORMED_MESSAGE",
            ErrorCode::EvaluatorFailure => "EVALUATOR_FAILURE",
            ErrorCode::Timeout => "TIMEOUT",
        }
    }

    /// Codes that mean the replica lost its environment (or never answered).
    pub fn is_replica_loss(self) -> bool {
        matches!(self, ErrorCode::ReplicaCrashed | ErrorCode::ReplicaRecovering | ErrorCode::Timeout)
    }

    /// Status code used when the error is returned over HTTP.
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::ReplicaBusy | ErrorCode::EpisodeDone => 409,
            ErrorCode::ReplicaCrashed | ErrorCode::ReplicaRecovering => 503,
            ErrorCode::UnknownReplica | ErrorCode::UnknownTask | ErrorCode::UnknownTicket => 404,
            ErrorCode::MalformedMessage => 400,
            ErrorCode::EvaluatorFailure => 500,
            ErrorCode::Timeout => 504,
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The only error shape that crosses the wire: one code plus free-form detail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {detail}")]
pub struct EngineError {
    pub code: ErrorCode,
    pub detail: String,
}

impl EngineError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        EngineError { code, detail: detail.into() }
    }
}

impl Message for EngineError {
    const TAG: &'static str = "error";
}
