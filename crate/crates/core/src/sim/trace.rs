//! Line-oriented trace format.
//!
//! ```text
//! # moonshot-sim trace v1 config=<json>
//! step=<int> | event=<json> | outbox=[<json>,...]
//! VIOLATION kind=<check> step=<int> detail=<json>
//! ```

use crate::encoding::{parse_canonical, Canonical};
use crate::validator::Outgoing;

use super::config::SimConfig;
use super::SimEvent;

pub const HEADER_PREFIX: &str = "# moonshot-sim trace v1 config=";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("missing or malformed trace header")]
    Header,
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("step numbers must increase strictly (line {line})")]
    StepOrder { line: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub step: u64,
    pub event: SimEvent,
    /// Canonical rendering of the resulting outbox, kept verbatim so replay
    /// compares bytes rather than re-parsed values.
    pub outbox: String,
}

pub fn header(cfg: &SimConfig) -> String {
    format!("{HEADER_PREFIX}{}\n", cfg.canonical())
}

pub fn record_line(step: u64, event: &SimEvent, outbox: &[Outgoing]) -> String {
    format!("step={step} | event={} | outbox={}\n", event.canonical(), outbox.canonical())
}

#[derive(Clone, Debug)]
pub struct ParsedTrace {
    pub config: SimConfig,
    pub records: Vec<TraceRecord>,
    pub violation_lines: Vec<String>,
}

pub fn parse(text: &str) -> Result<ParsedTrace, TraceError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(TraceError::Header)?;
    let cfg_text = first.strip_prefix(HEADER_PREFIX).ok_or(TraceError::Header)?;
    let config: SimConfig = parse_canonical(cfg_text).map_err(|_| TraceError::Header)?;
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut violation_lines = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with("VIOLATION ") {
            violation_lines.push(line.to_string());
            continue;
        }
        let syntax = |msg: &str| TraceError::Syntax {
            line: line_no,
            msg: msg.to_string(),
        };
        let rest = line.strip_prefix("step=").ok_or_else(|| syntax("expected `step=`"))?;
        let (step, rest) = rest.split_once(" | event=").ok_or_else(|| syntax("expected ` | event=`"))?;
        let (event, outbox) = rest.split_once(" | outbox=").ok_or_else(|| syntax("expected ` | outbox=`"))?;
        let step: u64 = step.parse().map_err(|_| syntax("bad step number"))?;
        let event: SimEvent = parse_canonical(event).map_err(|e| syntax(&format!("bad event: {e}")))?;
        if records.last().is_some_and(|r| r.step >= step) {
            return Err(TraceError::StepOrder { line: line_no });
        }
        records.push(TraceRecord {
            step,
            event,
            outbox: outbox.to_string(),
        });
    }
    Ok(ParsedTrace {
        config,
        records,
        violation_lines,
    })
}
