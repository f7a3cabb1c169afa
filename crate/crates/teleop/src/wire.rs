//! Newline-delimited JSON frames exchanged with operator consoles.
//!
//! Every frame is one JSON object on one line carrying `"v": 1` and a
//! `"type"` tag. Decoders ignore fields they do not know.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WIRE_VERSION: u32 = 1;

/// Half-space `normal · p ≤ offset` in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintLine {
    pub normal: [f64; 2],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    /// Snapshot counter, increasing per session.
    pub seq: u64,
    pub scenario: String,
    pub time: f64,
    pub step: u64,
    pub n: usize,
    pub leaders: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub m_estimates: Vec<[f64; 2]>,
    /// Reference the plant is currently driven with.
    pub applied_reference: [f64; 2],
    /// Reference requested by the operator (or the schedule).
    pub raw_reference: [f64; 2],
    pub constraints: Vec<ConstraintLine>,
    /// Per robot, `min_h (offset_h - normal_h · q_i)`; empty without constraints.
    pub margins: Vec<f64>,
    pub feasible: bool,
    pub paused: bool,
    /// Snapshots dropped for this client because it read too slowly.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorCommand {
    SetReference { r: [f64; 2] },
    Pause,
    Resume,
    Reset,
    LoadScenario { scenario: String },
    SetSpeed { speed: f64 },
}

impl OperatorCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            OperatorCommand::SetReference { .. } => "set_reference",
            OperatorCommand::Pause => "pause",
            OperatorCommand::Resume => "resume",
            OperatorCommand::Reset => "reset",
            OperatorCommand::LoadScenario { .. } => "load_scenario",
            OperatorCommand::SetSpeed { .. } => "set_speed",
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        match self {
            OperatorCommand::SetReference { r } if !r.iter().all(|v| v.is_finite()) => {
                Err(WireError::Invalid("set_reference payload must be finite".into()))
            }
            OperatorCommand::SetSpeed { speed } if !(speed.is_finite() && *speed > 0.0) => {
                Err(WireError::Invalid("speed must be positive and finite".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Snapshot(StateSnapshot),
    Ack { command: String },
    Error { message: String },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unsupported wire version {0}")]
    Version(u32),
    #[error("invalid command: {0}")]
    Invalid(String),
}

fn encode<T: Serialize>(body: &T) -> String {
    serde_json::to_string(&Envelope { v: WIRE_VERSION, body }).expect("frames serialize")
}

fn decode<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T, WireError> {
    let env: Envelope<T> = serde_json::from_str(line.trim_end()).map_err(|e| WireError::Malformed(e.to_string()))?;
    if env.v != WIRE_VERSION {
        return Err(WireError::Version(env.v));
    }
    Ok(env.body)
}

/// One frame without the trailing newline.
pub fn encode_frame(frame: &ServerFrame) -> String {
    encode(frame)
}

pub fn decode_frame(line: &str) -> Result<ServerFrame, WireError> {
    decode(line)
}

pub fn encode_snapshot(snapshot: &StateSnapshot) -> String {
    encode_frame(&ServerFrame::Snapshot(snapshot.clone()))
}

pub fn decode_snapshot(line: &str) -> Result<StateSnapshot, WireError> {
    match decode_frame(line)? {
        ServerFrame::Snapshot(s) => Ok(s),
        other => Err(WireError::Malformed(format!("expected a snapshot, got {other:?}"))),
    }
}

pub fn encode_command(command: &OperatorCommand) -> String {
    encode(command)
}

/// Decodes and validates a command frame.
pub fn decode_command(line: &str) -> Result<OperatorCommand, WireError> {
    let cmd: OperatorCommand = decode(line)?;
    cmd.validate()?;
    Ok(cmd)
}
