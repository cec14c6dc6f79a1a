//! JSON messages exchanged with the operator console.
//!
//! Every message is an object whose `type` field selects the variant.
//! Unknown fields are ignored on decode; encoding emits fields in
//! declaration order.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use toot_core::nn::Label;
use toot_core::tracker::TrackStatus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub positive: f64,
    pub negative: f64,
}

/// Tracked box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerInfo {
    pub status: TrackStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<TrackBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub seq: u64,
    /// Base64-encoded PNG display copy.
    pub image: String,
    /// Min-max normalized class activation map, one row per grid row.
    pub cam: Vec<Vec<f64>>,
    pub scores: Scores,
    pub model_version: u64,
    pub tracker: TrackerInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndMessage {
    pub frames: u64,
    pub model_version: u64,
}

/// Server to operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DownMessage {
    Frame(FrameMessage),
    Error(ErrorMessage),
    End(EndMessage),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagMessage {
    pub seq: u64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickMessage {
    pub seq: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Reset,
    /// Emit exactly one frame.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub action: ControlAction,
}

/// Operator to server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UpMessage {
    Tag(TagMessage),
    Click(ClickMessage),
    Control(ControlMessage),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}", match .field { Some(f) => format!("field `{f}`: {}", .message), None => .message.clone() })]
pub struct DecodeError {
    /// Dotted path of the offending field, when one can be named.
    pub field: Option<String>,
    pub message: String,
}

impl DecodeError {
    fn new(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

fn decode_body<T: DeserializeOwned>(value: Value) -> Result<T, DecodeError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = if path != "." {
            Some(path)
        } else {
            inner
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
                .map(str::to_string)
        };
        DecodeError {
            field,
            message: inner,
        }
    })
}

fn split_type(text: &str) -> Result<(String, Value), DecodeError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| DecodeError::new(None, e.to_string()))?;
    if !value.is_object() {
        return Err(DecodeError::new(None, "message is not a JSON object"));
    }
    match value.get("type") {
        Some(Value::String(t)) => Ok((t.clone(), value)),
        Some(_) => Err(DecodeError::new(Some("type"), "expected a string")),
        None => Err(DecodeError::new(Some("type"), "missing field `type`")),
    }
}

pub fn decode_up(text: &str) -> Result<UpMessage, DecodeError> {
    let (kind, value) = split_type(text)?;
    match kind.as_str() {
        "tag" => decode_body(value).map(UpMessage::Tag),
        "click" => decode_body(value).map(UpMessage::Click),
        "control" => decode_body(value).map(UpMessage::Control),
        other => Err(DecodeError::new(
            Some("type"),
            format!("unknown message type {other:?}"),
        )),
    }
}

pub fn decode_down(text: &str) -> Result<DownMessage, DecodeError> {
    let (kind, value) = split_type(text)?;
    match kind.as_str() {
        "frame" => decode_body(value).map(DownMessage::Frame),
        "error" => decode_body(value).map(DownMessage::Error),
        "end" => decode_body(value).map(DownMessage::End),
        other => Err(DecodeError::new(
            Some("type"),
            format!("unknown message type {other:?}"),
        )),
    }
}

pub fn encode_up(msg: &UpMessage) -> String {
    serde_json::to_string(msg).expect("message serializes")
}

pub fn encode_down(msg: &DownMessage) -> String {
    serde_json::to_string(msg).expect("message serializes")
}
