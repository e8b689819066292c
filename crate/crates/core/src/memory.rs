//! Append-only trajectory memory.
//!
//! Each prompt event (parents, prompt text, proposer, emitted candidates with
//! their scores) becomes one JSON object on its own line. The file is written
//! through on every append and can be replayed to rebuild the exact record
//! sequence.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CandidateId, ObjectiveSpec};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

/// Tolerance for `scalar_fitness == sum(oriented)` checks.
const FITNESS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {prompt_id}: {message}")]
    Invariant { prompt_id: u64, message: String },
    #[error("duplicate prompt id {0}")]
    DuplicatePromptId(u64),
}

impl MemoryError {
    /// 1-based line number for errors raised while reading a log.
    pub fn line(&self) -> Option<usize> {
        match self {
            MemoryError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// Initial population snapshot; carries the population capacity.
    Init,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    pub candidate_id: CandidateId,
    pub genotype: String,
    pub raw: Vec<f64>,
    pub oriented: Vec<f64>,
    pub scalar_fitness: f64,
    pub valid: bool,
    /// Exact text repeat of an existing population/archive member; carries
    /// the original's scores and does not enter survivor selection.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate: bool,
    pub sim_to_prompt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub kind: RecordKind,
    pub prompt_id: u64,
    pub timestamp: u64,
    pub generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Objective registry of the run (init records only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objectives: Vec<ObjectiveSpec>,
    pub parent_ids: Vec<CandidateId>,
    pub parent_genotypes: Vec<String>,
    pub prompt_text: String,
    pub proposer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub candidates: Vec<CandidateEntry>,
}

impl TrajectoryRecord {
    pub fn is_prompt(&self) -> bool {
        self.kind == RecordKind::Prompt
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<(), MemoryError> {
        let fail = |message: String| Err(MemoryError::Invariant { prompt_id: self.prompt_id, message });
        if self.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return fail(format!("unsupported schema version {}", self.schema_version));
        }
        if !matches!(self.parent_ids.len(), 0 | 2) {
            return fail(format!("{} parent ids, expected 0 or 2", self.parent_ids.len()));
        }
        if self.parent_ids.len() != self.parent_genotypes.len() {
            return fail("parent ids and parent genotypes differ in length".into());
        }
        match self.kind {
            RecordKind::Init if self.capacity.is_none() => return fail("init record without capacity".into()),
            RecordKind::Init if !self.parent_ids.is_empty() => return fail("init record with parents".into()),
            RecordKind::Prompt if self.capacity.is_some() || !self.objectives.is_empty() => {
                return fail("prompt record with init-only fields".into())
            }
            _ => {}
        }
        for c in &self.candidates {
            if c.genotype.is_empty() || c.genotype.contains(['\n', '\r']) {
                return fail(format!("candidate {} has a malformed genotype", c.candidate_id));
            }
            if let Some(sim) = c.sim_to_prompt {
                if !(0.0..=1.0).contains(&sim) {
                    return fail(format!("candidate {} similarity {sim} outside [0,1]", c.candidate_id));
                }
            }
            if !c.valid {
                if c.duplicate || !c.oriented.is_empty() || !c.raw.is_empty() || c.scalar_fitness != 0.0 {
                    return fail(format!("invalid candidate {} carries scores", c.candidate_id));
                }
                continue;
            }
            if c.raw.is_empty() || c.raw.len() != c.oriented.len() {
                return fail(format!("candidate {} has an incomplete score vector", c.candidate_id));
            }
            if c.oriented.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return fail(format!("candidate {} has oriented scores outside [0,1]", c.candidate_id));
            }
            let sum: f64 = c.oriented.iter().sum();
            if (sum - c.scalar_fitness).abs() > FITNESS_TOLERANCE {
                return fail(format!(
                    "candidate {} scalar fitness {} != sum of oriented scores {sum}",
                    c.candidate_id, c.scalar_fitness
                ));
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory records always serialize")
    }
}

/// Checks ordering between consecutive records.
fn check_order(prev: Option<&TrajectoryRecord>, next: &TrajectoryRecord) -> Result<(), MemoryError> {
    if let Some(prev) = prev {
        if next.prompt_id <= prev.prompt_id || next.timestamp <= prev.timestamp {
            return Err(MemoryError::Invariant {
                prompt_id: next.prompt_id,
                message: format!(
                    "prompt id/timestamp ({}, {}) not after ({}, {})",
                    next.prompt_id, next.timestamp, prev.prompt_id, prev.timestamp
                ),
            });
        }
    }
    Ok(())
}

/// Single-writer trajectory store with optional write-through persistence.
#[derive(Debug, Default)]
pub struct TrajectoryStore {
    records: Vec<TrajectoryRecord>,
    ids: HashSet<u64>,
    sink: Option<(PathBuf, File)>,
}

impl TrajectoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates (truncating) a log file at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|source| MemoryError::Io { path: path.clone(), source })?;
        Ok(Self { sink: Some((path, file)), ..Self::default() })
    }

    /// Replays an existing log and continues appending to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref().to_path_buf();
        let records = replay(&path)?.collect::<Result<Vec<_>, _>>()?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| MemoryError::Io { path: path.clone(), source })?;
        let ids = records.iter().map(|r| r.prompt_id).collect();
        Ok(Self { records, ids, sink: Some((path, file)) })
    }

    pub fn append(&mut self, rec: TrajectoryRecord) -> Result<(), MemoryError> {
        if self.ids.contains(&rec.prompt_id) {
            return Err(MemoryError::DuplicatePromptId(rec.prompt_id));
        }
        rec.validate()?;
        check_order(self.records.last(), &rec)?;
        if let Some((path, file)) = &mut self.sink {
            let mut line = rec.to_line();
            line.push('\n');
            let io = |source| MemoryError::Io { path: path.clone(), source };
            file.write_all(line.as_bytes()).map_err(io)?;
            file.flush().map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        self.ids.insert(rec.prompt_id);
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    /// The most recent `l` prompt records, newest last. Init records are not
    /// prompts and never appear.
    pub fn recent_window(&self, l: usize) -> Vec<&TrajectoryRecord> {
        recent_prompts(&self.records, l)
    }

    pub fn next_timestamp(&self) -> u64 {
        self.records.last().map_or(0, |r| r.timestamp + 1)
    }
}

pub fn recent_prompts(records: &[TrajectoryRecord], l: usize) -> Vec<&TrajectoryRecord> {
    let prompts: Vec<&TrajectoryRecord> = records.iter().filter(|r| r.is_prompt()).collect();
    let skip = prompts.len().saturating_sub(l);
    prompts.into_iter().skip(skip).collect()
}

/// Streams records from a log file in file order, validating each one.
pub struct LogReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    prev: Option<TrajectoryRecord>,
    failed: bool,
}

pub fn replay(path: impl AsRef<Path>) -> Result<LogReader, MemoryError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| MemoryError::Io { path: path.to_path_buf(), source })?;
    Ok(LogReader { lines: BufReader::new(file).lines(), line_no: 0, prev: None, failed: false })
}

impl Iterator for LogReader {
    type Item = Result<TrajectoryRecord, MemoryError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let line = self.lines.next()?;
        self.line_no += 1;
        let line_no = self.line_no;
        let result = line
            .map_err(|e| MemoryError::Parse { line: line_no, message: e.to_string() })
            .and_then(|text| {
                serde_json::from_str::<TrajectoryRecord>(&text)
                    .map_err(|e| MemoryError::Parse { line: line_no, message: e.to_string() })
            })
            .and_then(|rec| {
                rec.validate()
                    .and_then(|_| check_order(self.prev.as_ref(), &rec))
                    .map_err(|e| MemoryError::Parse { line: line_no, message: e.to_string() })?;
                Ok(rec)
            });
        match &result {
            Ok(rec) => self.prev = Some(rec.clone()),
            Err(_) => self.failed = true,
        }
        Some(result)
    }
}

/// Reads a whole log into memory.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, MemoryError> {
    replay(path)?.collect()
}
