//! Offline re-planning of a rollout-manager event log.
//!
//! Lines are either full [`LogRecord`]s (as written by the rollout manager) or
//! bare [`ControlEvent`]s. Records are re-planned against their recorded
//! snapshot and checked against the recorded commands; bare events are planned
//! against the state reconstructed so far.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::ControlEvent;
use crate::rollout::{on_event, Command, ControllerState, LogRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("corrupt log at byte offset {offset} (line {line}): {reason}")]
    Corrupt {
        offset: usize,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Record(LogRecord),
    Event(ControlEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub lines: usize,
    pub events_by_kind: BTreeMap<String, usize>,
    pub commands: usize,
    pub rejected: usize,
    pub final_state: ControllerState,
    pub divergences: Vec<Divergence>,
}

impl ReplayReport {
    pub fn is_consistent(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Splits and parses a log, reporting the byte offset of the first bad line.
pub fn parse_log(bytes: &[u8]) -> Result<Vec<LogLine>, ReplayError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, raw) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        let start = offset;
        offset += raw.len();
        let terminated = raw.last() == Some(&b'\n');
        let body = if terminated { &raw[..raw.len() - 1] } else { raw };
        let corrupt = |reason: String| ReplayError::Corrupt {
            offset: start,
            line: i + 1,
            reason,
        };
        let text = std::str::from_utf8(body).map_err(|e| corrupt(e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogLine>(text) {
            Ok(l) => out.push(l),
            Err(e) if !terminated => {
                return Err(corrupt(format!("truncated final line: {e}")));
            }
            Err(e) => return Err(corrupt(e.to_string())),
        }
    }
    Ok(out)
}

fn gates_differ(expected: &ControllerState, recorded: &ControllerState) -> Option<String> {
    if expected.version != recorded.version {
        return Some(format!(
            "version {} recorded, {} expected",
            recorded.version, expected.version
        ));
    }
    if expected.held != recorded.held || expected.switching != recorded.switching {
        return Some("hold/switch flags differ".into());
    }
    for (id, lane) in &recorded.lanes {
        if let Some(e) = expected.lanes.get(id) {
            if e.open != lane.open {
                return Some(format!("lane {id} open={} recorded, {} expected", lane.open, e.open));
            }
        }
    }
    None
}

pub fn replay(lines: &[LogLine]) -> ReplayReport {
    let mut report = ReplayReport::default();
    let mut state = ControllerState::default();
    let mut seen_record = false;
    for (i, line) in lines.iter().enumerate() {
        let n = i + 1;
        report.lines += 1;
        let (event, planned_on, recorded): (&ControlEvent, ControllerState, Option<&Vec<Command>>) =
            match line {
                LogLine::Record(r) => {
                    if seen_record {
                        if let Some(reason) = gates_differ(&state, &r.state) {
                            report.divergences.push(Divergence { line: n, reason });
                        }
                    }
                    seen_record = true;
                    (&r.event, r.state.clone(), Some(&r.commands))
                }
                LogLine::Event(e) => (e, state.clone(), None),
            };
        *report
            .events_by_kind
            .entry(event.kind().to_string())
            .or_insert(0) += 1;
        let plan = match on_event(event, &planned_on) {
            Ok(p) => p,
            Err(e) => {
                report.rejected += 1;
                if recorded.is_some_and(|c| !c.is_empty()) {
                    report.divergences.push(Divergence {
                        line: n,
                        reason: format!("recorded commands but re-planning fails: {e}"),
                    });
                }
                continue;
            }
        };
        if let Some(rec) = recorded {
            if *rec != plan {
                report.divergences.push(Divergence {
                    line: n,
                    reason: "re-planned commands differ from recorded ones".into(),
                });
            }
        }
        report.commands += plan.len();
        state = planned_on;
        for c in &plan {
            state.reduce(c);
        }
    }
    report.final_state = state;
    report
}

/// Differences between a replayed final state and a recorded snapshot.
pub fn check_snapshot(report: &ReplayReport, snapshot: &ControllerState) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(reason) = gates_differ(&report.final_state, snapshot) {
        out.push(reason);
    }
    out
}
