//! Wire messages, version 1.
//!
//! Inbound (client to server), one JSON object per websocket text frame or
//! HTTP request body:
//!
//! ```text
//! {"v": 1, "seq": 7, "kind": "teacher_action", "action": 2}
//! {"v": 1, "seq": 8, "kind": "place_agent", "x": 3, "y": 4}
//! ```
//!
//! `seq` must increase strictly within a session. Server-generated agent
//! ticks carry no `seq`. Outbound messages are tagged by `type`:
//! `snapshot` (the full session view after an accepted event), `rejected`
//! (the event was invalid; session unchanged) or `error`.

use bam_core::agents::Algorithm;
use bam_core::dataset::Signal;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

fn protocol_version() -> u32 {
    PROTOCOL_VERSION
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SelectTask { task: usize },
    StartDemo,
    TeacherAction { action: usize },
    EndDemo,
    StartAgentEpisode,
    AgentStep,
    FeedbackPositive,
    FeedbackNegative,
    Reset,
    PlaceAgent { x: usize, y: usize },
    EndSession,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    #[serde(default = "protocol_version")]
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn new(seq: u64, kind: EventKind) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq: Some(seq),
            kind,
        }
    }

    /// An agent tick generated by the server.
    pub fn tick() -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq: None,
            kind: EventKind::AgentStep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    TeacherControl,
    AgentControl,
    Ended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Demonstration,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub kind: EpisodeKind,
    pub steps: usize,
    /// Last action taken in the episode.
    pub last_action: Option<usize>,
    /// Signal currently attached to the last agent step.
    pub pending_feedback: Option<Signal>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub demo_pairs: usize,
    pub feedback_events: usize,
    pub transitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerStatus {
    /// Refits requested so far (one per completed episode).
    pub refits: usize,
    /// Refits reflected in the policy the agent currently acts with.
    pub policy_version: usize,
    pub refitting: bool,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub v: u32,
    pub session_id: String,
    pub environment: String,
    pub algorithm: Algorithm,
    /// Sequence number of the last accepted client event.
    pub seq: Option<u64>,
    /// Number of accepted events, ticks included.
    pub events: usize,
    pub mode: Mode,
    pub task: usize,
    pub tasks: Vec<String>,
    pub state: usize,
    pub x: usize,
    pub y: usize,
    /// Farming: carried implement (`none` when empty-handed).
    pub carrying: Option<String>,
    /// Gravity: current gravity direction.
    pub gravity: Option<String>,
    pub at_goal: bool,
    pub episode: Option<EpisodeStatus>,
    pub counts: Counts,
    pub learner: LearnerStatus,
    pub read_only: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    Rejected { seq: Option<u64>, reason: String },
    Error { message: String },
}
