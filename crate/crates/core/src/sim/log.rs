//! Invocation/response records of update processes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::Digest;

pub type ProcessId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Invoke {
        cohort: Vec<usize>,
        round: u64,
        args_hash: Digest,
        loaded_digest: Digest,
    },
    /// `output_digest` is absent when the transition completed without an
    /// aggregation result (recovery, or too few contributions).
    Respond {
        output_digest: Option<Digest>,
        evidence_digest: Digest,
    },
    Aborted {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub ts: u64,
    pub pid: ProcessId,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed log: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub records: Vec<Record>,
    clock: u64,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<Record>) -> Self {
        let clock = records.iter().map(|r| r.ts + 1).max().unwrap_or(0);
        Self { records, clock }
    }

    pub fn push(&mut self, pid: ProcessId, event: Event) {
        self.records.push(Record {
            ts: self.clock,
            pid,
            event,
        });
        self.clock += 1;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::from_records(records))
    }
}

impl fmt::Display for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_jsonl())
    }
}

/// Invoke and terminal event of one process, after well-formedness checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessSpan {
    pub pid: ProcessId,
    pub invoke_ts: u64,
    pub cohort: Vec<usize>,
    pub round: u64,
    pub args_hash: Digest,
    pub loaded_digest: Digest,
    pub end: Option<(u64, Event)>,
}

impl ProcessSpan {
    pub fn response(&self) -> Option<(u64, Option<Digest>, Digest)> {
        match &self.end {
            Some((ts, Event::Respond { output_digest, evidence_digest })) => {
                Some((*ts, *output_digest, *evidence_digest))
            }
            _ => None,
        }
    }

    pub fn completed(&self) -> bool {
        self.response().is_some()
    }
}

/// Group records by process, rejecting logs that break the record discipline:
/// strictly increasing timestamps, one invoke first, at most one terminal.
pub fn spans(log: &EventLog) -> Result<Vec<ProcessSpan>, LogError> {
    let malformed = |m: String| Err(LogError::Malformed(m));
    let mut out: Vec<ProcessSpan> = Vec::new();
    let mut index = std::collections::BTreeMap::new();
    let mut last_ts = None;
    for r in &log.records {
        if last_ts.is_some_and(|t| r.ts <= t) {
            return malformed(format!("timestamp {} does not increase", r.ts));
        }
        last_ts = Some(r.ts);
        match &r.event {
            Event::Invoke {
                cohort,
                round,
                args_hash,
                loaded_digest,
            } => {
                if index.contains_key(&r.pid) {
                    return malformed(format!("process {} invoked twice", r.pid));
                }
                index.insert(r.pid, out.len());
                out.push(ProcessSpan {
                    pid: r.pid,
                    invoke_ts: r.ts,
                    cohort: cohort.clone(),
                    round: *round,
                    args_hash: *args_hash,
                    loaded_digest: *loaded_digest,
                    end: None,
                });
            }
            terminal => {
                let Some(&k) = index.get(&r.pid) else {
                    return malformed(format!("process {} ends before invoking", r.pid));
                };
                if out[k].end.is_some() {
                    return malformed(format!("process {} ends twice", r.pid));
                }
                out[k].end = Some((r.ts, terminal.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::hash;

    fn invoke(round: u64) -> Event {
        Event::Invoke {
            cohort: vec![1, 2],
            round,
            args_hash: hash(b"a"),
            loaded_digest: hash(b"l"),
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut log = EventLog::new();
        log.push(0, invoke(0));
        log.push(0, Event::Respond { output_digest: None, evidence_digest: hash(b"e") });
        log.push(1, Event::Aborted { reason: "quorum".into() });
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"type\":\"invoke\""));
        assert_eq!(EventLog::from_jsonl(&text).unwrap(), log);
        assert!(matches!(
            EventLog::from_jsonl(&text[..text.len() - 5]),
            Err(LogError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn span_discipline() {
        let mut log = EventLog::new();
        log.push(0, invoke(0));
        log.push(0, Event::Respond { output_digest: None, evidence_digest: hash(b"e") });
        assert_eq!(spans(&log).unwrap().len(), 1);
        log.push(0, Event::Aborted { reason: "late".into() });
        assert!(spans(&log).is_err());

        let mut log = EventLog::new();
        log.push(3, Event::Aborted { reason: "x".into() });
        assert!(spans(&log).is_err());

        let log = EventLog::from_records(vec![
            Record { ts: 2, pid: 0, event: invoke(0) },
            Record { ts: 2, pid: 1, event: invoke(0) },
        ]);
        assert!(spans(&log).is_err());
    }
}
