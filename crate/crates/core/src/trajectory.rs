//! Rollout records and their line-delimited file format.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_response, Action, AgentResponse, Platform};
use crate::env::VerifierSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// State the response was produced in.
    pub state_ref: String,
    /// Raw three-tag agent turn.
    pub response: String,
    /// Action that was executed, `None` when the response did not parse.
    pub action: Option<Action>,
}

impl TrajectoryStep {
    pub fn parsed(&self, platform: Platform) -> AgentResponse {
        parse_response(&self.response, platform)
    }
}

/// Where a record came from and what refinement did to it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub app_id: String,
    pub instruction: String,
    pub platform: Platform,
    pub steps: Vec<TrajectoryStep>,
    /// Set by the verifier only.
    pub success: bool,
    pub terminal_state_ref: String,
    /// Replaces the task's verifier when a rewrite retargeted the instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierSpec>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn unparseable_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_none()).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = Option<&Action>> {
        self.steps.iter().map(|s| s.action.as_ref())
    }
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn write_jsonl(path: impl AsRef<Path>, traces: &[Trajectory]) -> Result<(), TraceIoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)
            .map_err(|e| TraceIoError::Record { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, TraceIoError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| TraceIoError::Record {
                line: i + 1,
                source: e,
            })?,
        );
    }
    Ok(out)
}
