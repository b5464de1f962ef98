//! Stream message schema. Field names are part of the wire contract; see
//! docs/stream-protocol.md.

use serde::{Deserialize, Serialize};

use crate::mapping::ScreenMapping;

pub const FRAME_HZ: f64 = 50.0;
/// Input silence after which a running trial is abandoned.
pub const GAP_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Break,
    Validation,
}

/// First message on every stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    #[serde(rename = "type")]
    pub kind: String,
    pub session_id: String,
    pub frame_hz: f64,
    pub control_hz: f64,
    pub gap_ms: u64,
    pub gait_period_s: f64,
    pub mapping: ScreenMapping,
    pub deadband_radius: [f64; 2],
    /// Reference loop in screen coordinates.
    pub path: Vec<[f64; 2]>,
}

/// Server → client, once per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub frame: u64,
    pub server_time_ms: f64,
    pub phase: Phase,
    pub reference: [f64; 2],
    pub cursor: [f64; 2],
    pub assisted: [f64; 2],
    pub deadband_radius: [f64; 2],
    /// Hip and knee stiffness of the trial (Nm/rad); display only.
    pub stiffness: [f64; 2],
    pub remaining_s: f64,
    pub running_cost: f64,
    /// Trials completed in the session.
    pub trials_completed: usize,
}

/// Client → server. Unknown fields are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMessage {
    pub client_time_ms: f64,
    pub position: [f64; 2],
}

impl InputMessage {
    pub fn is_valid(&self) -> bool {
        self.client_time_ms.is_finite() && self.position.iter().all(|v| (0.0..=1.0).contains(v))
    }
}
