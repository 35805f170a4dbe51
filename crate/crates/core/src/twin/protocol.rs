//! Wire format: JSON text frames `{type, seq?, body}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::voxel::Cell;

pub const PROTOCOL_VERSION: u32 = 1;

/// JSON Schema for every frame on the wire.
pub const SCHEMA: &str = include_str!("../../protocol/twin-protocol-v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Hello,
    Snapshot,
    Event,
    JointState,
    Control,
    Edit,
    Replan,
    Ack,
    Error,
}

impl MsgType {
    pub fn from_client(self) -> bool {
        matches!(self, MsgType::Control | MsgType::Edit | MsgType::Replan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    #[serde(rename = "type")]
    pub kind: MsgType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default)]
    pub body: Value,
}

impl Message {
    pub fn new(kind: MsgType, body: Value) -> Self {
        Message { kind, seq: None, body }
    }

    pub fn hello() -> Self {
        Message::new(MsgType::Hello, json!({ "protocol_version": PROTOCOL_VERSION, "joint_values": "synthetic" }))
    }

    pub fn ack(seq: Option<u64>, body: Value) -> Self {
        Message { kind: MsgType::Ack, seq, body }
    }

    pub fn error(seq: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Message::error_with(seq, code, message, Value::Null)
    }

    pub fn error_with(seq: Option<u64>, code: ErrorCode, message: impl Into<String>, detail: Value) -> Self {
        let mut body = json!({ "code": code, "message": message.into() });
        if !detail.is_null() {
            body["detail"] = detail;
        }
        Message { kind: MsgType::Error, seq, body }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    /// Error code of an error frame.
    pub fn code(&self) -> Option<ErrorCode> {
        (self.kind == MsgType::Error).then(|| serde_json::from_value(self.body["code"].clone()).ok()).flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadJson,
    BadMessage,
    SimRunning,
    NoPlan,
    InvalidValue,
    OutOfBounds,
    OverlapsStructure,
    UnknownPattern,
    UnknownFeed,
    FeedTaken,
    UnknownTarget,
    NoRobots,
    NoTargets,
    PlanInfeasible,
    SimFailed,
    Lagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Resume,
    /// Advance to the next event time while paused.
    Step,
    Speed,
    /// Back to t = 0 with the current plan.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control {
    pub action: ControlAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    AddFeed {
        cell: Cell,
    },
    RemoveFeed {
        id: String,
    },
    AddRobot {
        feed_id: String,
    },
    AddBlockTarget {
        pattern: String,
        anchor: Cell,
        #[serde(default)]
        rot: u32,
    },
    RemoveBlockTarget {
        index: usize,
    },
    Clear,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Replan {
    /// Blocks per trip; keeps the session value when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
}

/// A parsed client command.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Control(Control),
    Edit(Edit),
    Replan(Replan),
}

/// Parses one text frame. Errors come back as ready-to-send error frames.
pub fn parse_command(text: &str) -> Result<(Option<u64>, Command), Message> {
    let v: Value = serde_json::from_str(text).map_err(|e| Message::error(None, ErrorCode::BadJson, e.to_string()))?;
    let seq = v.get("seq").and_then(Value::as_u64);
    let msg: Message =
        serde_json::from_value(v).map_err(|e| Message::error(seq, ErrorCode::BadMessage, e.to_string()))?;
    let bad = |e: serde_json::Error| Message::error(seq, ErrorCode::BadMessage, e.to_string());
    let body = if msg.body.is_null() { json!({}) } else { msg.body };
    let cmd = match msg.kind {
        MsgType::Control => Command::Control(serde_json::from_value(body).map_err(bad)?),
        MsgType::Edit => Command::Edit(serde_json::from_value(body).map_err(bad)?),
        MsgType::Replan => Command::Replan(serde_json::from_value(body).map_err(bad)?),
        other => {
            return Err(Message::error(seq, ErrorCode::BadMessage, format!("{other:?} is not a client command")));
        }
    };
    Ok((seq, cmd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands() {
        let (seq, c) = parse_command(r#"{"type":"control","seq":3,"body":{"action":"pause"}}"#).unwrap();
        assert_eq!(seq, Some(3));
        assert_eq!(c, Command::Control(Control { action: ControlAction::Pause, value: None }));
        let (_, c) = parse_command(r#"{"type":"edit","seq":4,"body":{"op":"add_feed","params":{"cell":[-1,1,0]}}}"#).unwrap();
        assert_eq!(c, Command::Edit(Edit::AddFeed { cell: [-1, 1, 0] }));
        let (_, c) = parse_command(r#"{"type":"edit","seq":5,"body":{"op":"clear"}}"#).unwrap();
        assert_eq!(c, Command::Edit(Edit::Clear));
        let (_, c) = parse_command(r#"{"type":"replan","seq":6}"#).unwrap();
        assert_eq!(c, Command::Replan(Replan::default()));
    }

    #[test]
    fn malformed_frames() {
        let e = parse_command("{nope").unwrap_err();
        assert_eq!(e.code(), Some(ErrorCode::BadJson));
        assert_eq!(e.seq, None);
        let e = parse_command(r#"{"type":"edit","seq":9,"body":{"op":"teleport"}}"#).unwrap_err();
        assert_eq!(e.code(), Some(ErrorCode::BadMessage));
        assert_eq!(e.seq, Some(9));
        let e = parse_command(r#"{"type":"snapshot","seq":1}"#).unwrap_err();
        assert_eq!(e.code(), Some(ErrorCode::BadMessage));
    }

    #[test]
    fn edit_round_trip() {
        let e = Edit::AddBlockTarget { pattern: "4x2x2".into(), anchor: [0, 0, 0], rot: 90 };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v, json!({"op":"add_block_target","params":{"pattern":"4x2x2","anchor":[0,0,0],"rot":90}}));
        assert_eq!(serde_json::from_value::<Edit>(v).unwrap(), e);
        assert_eq!(serde_json::to_value(Edit::Clear).unwrap(), json!({"op":"clear"}));
    }
}
