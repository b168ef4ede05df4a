//! Session events: the transcript file and the HTTP stream carry the same
//! lines.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Decision, OrchestratorConfig, TerminationReason};
use crate::agent::{AgentProfile, AgentTurn, Instruction};
use crate::ranking::{RankedEntry, RankedList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    SessionStarted {
        target_user: String,
        query: String,
        policy: String,
        config: OrchestratorConfig,
        agents: Vec<AgentProfile>,
    },
    RoundStarted {
        active: Vec<String>,
    },
    Instruction(Instruction),
    AgentTurn(AgentTurn),
    DraftList(RankedList),
    Decision(Decision),
    FinalList {
        entries: Vec<RankedEntry>,
        reason: TerminationReason,
        rounds_used: usize,
    },
    SessionFailed {
        error: String,
    },
}

impl EventPayload {
    pub fn type_name(&self) -> &'static str {
        match self {
            Self::SessionStarted { .. } => "session_started",
            Self::RoundStarted { .. } => "round_started",
            Self::Instruction(_) => "instruction",
            Self::AgentTurn(_) => "agent_turn",
            Self::DraftList(_) => "draft_list",
            Self::Decision(_) => "decision",
            Self::FinalList { .. } => "final_list",
            Self::SessionFailed { .. } => "session_failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::FinalList { .. } | Self::SessionFailed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    pub seq: u64,
    pub round: usize,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("session events always serialize")
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("event sink closed: {0}")]
pub struct SinkError(pub String);

pub trait EventSink {
    fn emit(&mut self, event: &SessionEvent) -> Result<(), SinkError>;
}

/// Discards events; the state still keeps its own copy.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _: &SessionEvent) -> Result<(), SinkError> {
        Ok(())
    }
}

impl EventSink for Vec<SessionEvent> {
    fn emit(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        self.push(event.clone());
        Ok(())
    }
}

/// Writes one JSON line per event, flushing after each.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> EventSink for JsonlSink<W> {
    fn emit(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        writeln!(self.0, "{}", event.to_line())
            .and_then(|_| self.0.flush())
            .map_err(|e| SinkError(e.to_string()))
    }
}

/// Sends each event to both sinks; the first failure wins.
pub struct Tee<'a, 'b>(pub &'a mut dyn EventSink, pub &'b mut dyn EventSink);

impl EventSink for Tee<'_, '_> {
    fn emit(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        self.0.emit(event)?;
        self.1.emit(event)
    }
}

pub fn write_transcript(events: &[SessionEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        writeln!(out, "{}", e.to_line())?;
    }
    out.flush()
}

pub fn read_transcript(text: &str) -> Result<Vec<SessionEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
