//! Wire records shared by clients, the data server and the replica managers.
//!
//! Every top-level message travels inside a versioned envelope
//! `{"v": 1, "type": <tag>, "body": {...}}`. Encoding is canonical: UTF-8
//! JSON with lexicographically sorted object keys, screenshots as base64.
//! Two encodings of the same record are byte-identical.

mod action;
mod error;
pub mod messages;
mod observation;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use action::{validate_action, Action, ActionKind, ActionPayload, MouseButton, MAX_TEXT_BYTES};
pub use error::{EngineError, ErrorCode};
pub use observation::{png_dimensions, validate_observation, Observation, StepResult, MAX_SCREENSHOT_BYTES};

pub const PROTOCOL_VERSION: u64 = 1;

/// Identifier of one replica manager, formatted `mgr-<host>-<index>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReplicaId(String);

impl ReplicaId {
    pub fn new(host: &str, index: u32) -> Self {
        ReplicaId(format!("mgr-{host}-{index}"))
    }

    pub fn parse(raw: &str) -> Result<Self, String> {
        let rest = raw
            .strip_prefix("mgr-")
            .ok_or_else(|| format!("replica id {raw:?} must start with \"mgr-\""))?;
        let (host, index) = rest
            .rsplit_once('-')
            .ok_or_else(|| format!("replica id {raw:?} must look like mgr-<host>-<index>"))?;
        if host.is_empty() {
            return Err(format!("replica id {raw:?} has an empty host"));
        }
        if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("replica id {raw:?} has a non-numeric index"));
        }
        Ok(ReplicaId(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ReplicaId {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        ReplicaId::parse(&value)
    }
}

impl From<ReplicaId> for String {
    fn from(id: ReplicaId) -> String {
        id.0
    }
}

/// Screen geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub width: u32,
    pub height: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { width: 1920, height: 1080 }
    }
}

/// A record that can cross the wire as a top-level message.
pub trait Message: Serialize + DeserializeOwned {
    const TAG: &'static str;

    /// Invariants that serde alone cannot express.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, M> {
    v: u64,
    #[serde(rename = "type")]
    kind: &'a str,
    body: &'a M,
}

/// Canonical encoding of a protocol record.
pub fn encode_message<M: Message>(msg: &M) -> Vec<u8> {
    let envelope = EnvelopeOut { v: PROTOCOL_VERSION, kind: M::TAG, body: msg };
    // serde_json::Value keeps object keys in a BTreeMap, so going through it
    // sorts every level of the document.
    let value = serde_json::to_value(&envelope).expect("protocol records are always encodable");
    serde_json::to_vec(&value).expect("json values are always serializable")
}

/// Inverse of [`encode_message`] for the expected record type `M`.
pub fn decode_message<M: Message>(bytes: &[u8]) -> Result<M, EngineError> {
    let malformed = |detail: String| EngineError::new(ErrorCode::MalformedMessage, detail);
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| malformed(format!("invalid json: {e}")))?;
    let serde_json::Value::Object(mut envelope) = value else {
        return Err(malformed("message is not a json object".into()));
    };
    match envelope.get("v").and_then(|v| v.as_u64()) {
        Some(PROTOCOL_VERSION) => {}
        Some(other) => return Err(malformed(format!("unsupported protocol version {other}"))),
        None => return Err(malformed("missing version field \"v\"".into())),
    }
    match envelope.get("type").and_then(|t| t.as_str()) {
        Some(tag) if tag == M::TAG => {}
        Some(tag) => return Err(malformed(format!("expected message type {:?}, got {tag:?}", M::TAG))),
        None => return Err(malformed("missing message type".into())),
    }
    let body = envelope
        .remove("body")
        .ok_or_else(|| malformed("missing message body".into()))?;
    for key in envelope.keys() {
        if !matches!(key.as_str(), "v" | "type") {
            tracing::warn!(message_type = M::TAG, field = %key, "ignoring unknown envelope field");
        }
    }
    let msg: M = serde_ignored::deserialize(body, |path| {
        tracing::warn!(message_type = M::TAG, field = %path, "ignoring unknown field");
    })
    .map_err(|e| malformed(format!("invalid {} body: {e}", M::TAG)))?;
    msg.check().map_err(malformed)?;
    Ok(msg)
}
