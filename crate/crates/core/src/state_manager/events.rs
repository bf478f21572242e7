use std::io::Write;

use parking_lot::Mutex;
use serde::Serialize;

use super::ReplicaState;
use crate::protocol::ReplicaId;

/// One state transition, as written to the event log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManagerEvent {
    pub event: &'static str,
    pub replica_id: ReplicaId,
    pub from: ReplicaState,
    pub to: ReplicaState,
    pub reason: String,
    pub at_ms: u64,
}

pub trait EventSink: Send + Sync + 'static {
    fn emit(&self, event: &ManagerEvent);
}

/// One JSON object per line on standard output.
pub struct StdoutJsonSink;

impl EventSink for StdoutJsonSink {
    fn emit(&self, event: &ManagerEvent) {
        if let Ok(line) = serde_json::to_string(event) {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
        }
    }
}

pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: &ManagerEvent) {}
}

#[derive(Default)]
pub struct CollectingSink {
    events: Mutex<Vec<ManagerEvent>>,
}

impl CollectingSink {
    pub fn events(&self) -> Vec<ManagerEvent> {
        self.events.lock().clone()
    }

    pub fn take(&self) -> Vec<ManagerEvent> {
        std::mem::take(&mut *self.events.lock())
    }
}

impl EventSink for CollectingSink {
    fn emit(&self, event: &ManagerEvent) {
        self.events.lock().push(event.clone());
    }
}
