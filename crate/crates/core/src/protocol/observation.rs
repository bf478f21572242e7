use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{Geometry, Message};

/// Cap on one encoded screenshot.
pub const MAX_SCREENSHOT_BYTES: usize = 4 * 1024 * 1024;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Milliseconds on a process-wide monotonic clock.
pub fn monotonic_ms() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_millis() as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(with = "base64_bytes")]
    pub screenshot: Bytes,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub captured_at: u64,
}

impl Observation {
    pub fn new(screenshot: impl Into<Bytes>, turn: u64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("turn".to_string(), turn.to_string());
        Observation { screenshot: screenshot.into(), metadata, captured_at: monotonic_ms() }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn turn(&self) -> Option<u64> {
        self.metadata.get("turn").and_then(|t| t.parse().ok())
    }

    fn check_intrinsic(&self) -> Result<(), String> {
        if self.screenshot.is_empty() {
            return Err("empty screenshot".into());
        }
        if self.screenshot.len() > MAX_SCREENSHOT_BYTES {
            return Err(format!("screenshot exceeds {MAX_SCREENSHOT_BYTES} bytes"));
        }
        if self.turn().is_none() {
            return Err("metadata \"turn\" is missing or not a non-negative integer".into());
        }
        Ok(())
    }
}

impl Message for Observation {
    const TAG: &'static str = "observation";

    fn check(&self) -> Result<(), String> {
        self.check_intrinsic()
    }
}

/// Width and height from a PNG header, if `bytes` starts with one.
pub fn png_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    if bytes.len() < 24 || bytes[..8] != PNG_SIGNATURE || &bytes[12..16] != b"IHDR" {
        return None;
    }
    let width = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
    let height = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
    Some((width, height))
}

/// Full observation check, including that the screenshot is a PNG of `geometry`.
pub fn validate_observation(obs: &Observation, geometry: Geometry) -> Result<(), String> {
    obs.check_intrinsic()?;
    match png_dimensions(&obs.screenshot) {
        Some((w, h)) if w == geometry.width && h == geometry.height => Ok(()),
        Some((w, h)) => Err(format!(
            "screenshot is {w}x{h}, expected {}x{}",
            geometry.width, geometry.height
        )),
        None => Err("screenshot is not a png".into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub turn: u64,
    pub latency_ms: f64,
}

impl Message for StepResult {
    const TAG: &'static str = "step_result";

    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(format!("reward {} outside [0, 1]", self.reward));
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(format!("invalid latency {}", self.latency_ms));
        }
        self.observation.check_intrinsic()
    }
}

pub(crate) mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &Bytes, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD
            .decode(text.as_bytes())
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }
}
