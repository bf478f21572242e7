use serde::{Deserialize, Serialize};

use super::{Geometry, Message};

/// Upper bound on a `type_text` payload, in bytes.
pub const MAX_TEXT_BYTES: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MouseButton {
    Left,
    Right,
    Middle,
}

/// Kind-dependent payload. Exactly one variant is populated by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionPayload {
    KeyPress { key: String },
    TypeText { text: String },
    MouseMove { x: i64, y: i64 },
    MouseClick { x: i64, y: i64, button: MouseButton },
    Scroll { delta: i64 },
    ApiCall {
        name: String,
        #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
        args: serde_json::Value,
    },
    Noop,
    Terminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    KeyPress,
    TypeText,
    MouseMove,
    MouseClick,
    Scroll,
    ApiCall,
    Noop,
    Terminate,
}

/// One agent action, optionally preceded by the agent's reasoning text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    #[serde(flatten)]
    pub payload: ActionPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
}

impl Action {
    pub fn new(payload: ActionPayload) -> Self {
        Action { payload, thought: None }
    }

    pub fn with_thought(mut self, thought: impl Into<String>) -> Self {
        self.thought = Some(thought.into());
        self
    }

    pub fn kind(&self) -> ActionKind {
        match self.payload {
            ActionPayload::KeyPress { .. } => ActionKind::KeyPress,
            ActionPayload::TypeText { .. } => ActionKind::TypeText,
            ActionPayload::MouseMove { .. } => ActionKind::MouseMove,
            ActionPayload::MouseClick { .. } => ActionKind::MouseClick,
            ActionPayload::Scroll { .. } => ActionKind::Scroll,
            ActionPayload::ApiCall { .. } => ActionKind::ApiCall,
            ActionPayload::Noop => ActionKind::Noop,
            ActionPayload::Terminate => ActionKind::Terminate,
        }
    }

    pub fn is_terminate(&self) -> bool {
        matches!(self.payload, ActionPayload::Terminate)
    }

    fn coordinates(&self) -> Option<(i64, i64)> {
        match self.payload {
            ActionPayload::MouseMove { x, y } | ActionPayload::MouseClick { x, y, .. } => Some((x, y)),
            _ => None,
        }
    }

    /// Checks that hold regardless of screen geometry.
    fn check_intrinsic(&self) -> Result<(), String> {
        if let Some((x, y)) = self.coordinates() {
            if x < 0 {
                return Err("x out of range".into());
            }
            if y < 0 {
                return Err("y out of range".into());
            }
        }
        match &self.payload {
            ActionPayload::TypeText { text } if text.len() > MAX_TEXT_BYTES => Err("payload too large".into()),
            ActionPayload::KeyPress { key } if key.is_empty() => Err("empty key name".into()),
            ActionPayload::ApiCall { name, .. } if name.is_empty() => Err("empty api_call name".into()),
            _ => Ok(()),
        }
    }
}

impl Message for Action {
    const TAG: &'static str = "action";

    fn check(&self) -> Result<(), String> {
        self.check_intrinsic()
    }
}

/// Checks every action invariant against the replica's screen geometry.
pub fn validate_action(action: &Action, geometry: Geometry) -> Result<(), String> {
    action.check_intrinsic()?;
    if let Some((x, y)) = action.coordinates() {
        if x >= i64::from(geometry.width) {
            return Err("x out of range".into());
        }
        if y >= i64::from(geometry.height) {
            return Err("y out of range".into());
        }
    }
    Ok(())
}
