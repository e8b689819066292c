//! Multi-objective scoring: a built-in suite of deterministic surrogate
//! objectives and a line-oriented wire contract for external scorers.
//!
//! Wire format, one batch per round trip:
//!
//! ```text
//! request:  SCORE <id> <genotype-text>      (one line per candidate)
//!           END
//! reply:    RESULT <id> <0|1> <s1> ... <sK>  (one line per candidate)
//!           END
//! ```
//!
//! The same bytes travel over a subprocess's stdin/stdout or as an HTTP POST
//! body and response body.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{tokenize, validate_registry, DomainError, Direction, Genotype, ObjectiveSpec, ScoreVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("genotype failed validity check")]
    InvalidGenotype,
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("unknown builtin objective `{0}`")]
    UnknownObjective(String),
    #[error("scorer needs at least 2 objectives, got {0}")]
    TooFewObjectives(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Tokens accepted by the builtin validity check.
pub const BUILTIN_ALPHABET: [&str; 31] = [
    "B", "C", "N", "O", "P", "S", "F", "I", "Cl", "Br", "b", "c", "n", "o", "s", "p", "H", "1", "2", "3", "4",
    "5", "6", "7", "8", "9", "(", ")", "[", "]", "=",
];
const EXTRA_BOND_TOKENS: [&str; 6] = ["#", "-", "+", "@", "/", "\\"];

/// Builtin validity: every token belongs to the builtin alphabet and round
/// and square brackets are balanced and properly nested.
pub fn validate(g: &str) -> bool {
    if g.is_empty() {
        return false;
    }
    let mut stack = Vec::new();
    for tok in tokenize(g) {
        if !BUILTIN_ALPHABET.contains(&tok) && !EXTRA_BOND_TOKENS.contains(&tok) {
            return false;
        }
        match tok {
            "(" | "[" => stack.push(tok),
            ")" if stack.pop() != Some("(") => return false,
            "]" if stack.pop() != Some("[") => return false,
            _ => {}
        }
    }
    stack.is_empty()
}

/// Token count at which `lengthband` peaks.
pub const LENGTH_TARGET: usize = 20;
/// Motif rewarded by `motifcount`.
pub const REWARD_MOTIF: &str = "C(=O)N";
/// Motif penalised by `motifavoid`.
pub const BANNED_MOTIF: &str = "Br";

/// The builtin surrogate objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surrogate {
    /// `max(0, 1 - |tokens - 20| / 20)`, maximised.
    LengthBand,
    /// Shannon entropy of the token distribution divided by
    /// `ln(min(tokens, distinct alphabet size))`, maximised.
    CharBalance,
    /// Non-overlapping occurrences of `C(=O)N`, maximised, saturating at 3.
    MotifCount,
    /// Occurrences of `Br`, minimised, saturating at 3.
    MotifAvoid,
    /// Maximum nesting depth of round/square brackets, minimised, saturating at 4.
    BracketDepth,
}

impl Surrogate {
    pub const ALL: [Surrogate; 5] =
        [Surrogate::LengthBand, Surrogate::CharBalance, Surrogate::MotifCount, Surrogate::MotifAvoid, Surrogate::BracketDepth];

    pub fn name(self) -> &'static str {
        match self {
            Surrogate::LengthBand => "lengthband",
            Surrogate::CharBalance => "charbalance",
            Surrogate::MotifCount => "motifcount",
            Surrogate::MotifAvoid => "motifavoid",
            Surrogate::BracketDepth => "bracketdepth",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ObjectiveError> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| ObjectiveError::UnknownObjective(name.to_owned()))
    }

    pub fn spec(self) -> ObjectiveSpec {
        let (direction, range) = match self {
            Surrogate::LengthBand | Surrogate::CharBalance => (Direction::Maximize, (0.0, 1.0)),
            Surrogate::MotifCount => (Direction::Maximize, (0.0, 3.0)),
            Surrogate::MotifAvoid => (Direction::Minimize, (0.0, 3.0)),
            Surrogate::BracketDepth => (Direction::Minimize, (0.0, 4.0)),
        };
        ObjectiveSpec::new(self.name(), direction, Some(range))
    }

    /// Genotype reaching an oriented score of at least 0.99 on this objective.
    pub fn exemplar(self) -> &'static str {
        match self {
            Surrogate::LengthBand => "CCCCCCCCCCCCCCCCCCCC",
            Surrogate::CharBalance => "CNOSF",
            Surrogate::MotifCount => "C(=O)NC(=O)NC(=O)N",
            Surrogate::MotifAvoid | Surrogate::BracketDepth => "CCO",
        }
    }

    pub fn raw(self, text: &str) -> f64 {
        let tokens = tokenize(text);
        match self {
            Surrogate::LengthBand => {
                let n = tokens.len() as f64;
                let t = LENGTH_TARGET as f64;
                (1.0 - (n - t).abs() / t).max(0.0)
            }
            Surrogate::CharBalance => {
                let n = tokens.len();
                if n < 2 {
                    return 0.0;
                }
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for t in &tokens {
                    *counts.entry(t).or_default() += 1;
                }
                let entropy: f64 = counts
                    .values()
                    .map(|&c| {
                        let p = c as f64 / n as f64;
                        -p * p.ln()
                    })
                    .sum();
                let cap = n.min(BUILTIN_ALPHABET.len() + EXTRA_BOND_TOKENS.len()) as f64;
                (entropy / cap.ln()).clamp(0.0, 1.0)
            }
            Surrogate::MotifCount => text.matches(REWARD_MOTIF).count() as f64,
            Surrogate::MotifAvoid => text.matches(BANNED_MOTIF).count() as f64,
            Surrogate::BracketDepth => {
                let mut depth = 0i64;
                let mut max = 0i64;
                for t in tokens {
                    match t {
                        "(" | "[" => {
                            depth += 1;
                            max = max.max(depth);
                        }
                        ")" | "]" => depth -= 1,
                        _ => {}
                    }
                }
                max as f64
            }
        }
    }
}

/// Transport carrying one wire-format batch to an external scorer.
pub trait ScoreTransport: Send + Sync {
    fn exchange(&self, request: &str, timeout: Duration) -> Result<String, ObjectiveError>;
    fn describe(&self) -> String;
}

/// Spawns the command per batch, writes the request to stdin and reads the
/// reply from stdout.
#[derive(Debug, Clone)]
pub struct SubprocessTransport {
    pub command: Vec<String>,
}

impl ScoreTransport for SubprocessTransport {
    fn exchange(&self, request: &str, timeout: Duration) -> Result<String, ObjectiveError> {
        run_with_timeout(&self.command, &[], request.as_bytes(), timeout)
            .map_err(ObjectiveError::ScorerUnavailable)
            .and_then(|(status_ok, out)| {
                if status_ok {
                    Ok(out)
                } else {
                    Err(ObjectiveError::ScorerUnavailable("scorer exited with failure".into()))
                }
            })
    }

    fn describe(&self) -> String {
        format!("subprocess:{}", self.command.join(" "))
    }
}

/// POSTs the request body and reads the reply body.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub url: String,
}

impl ScoreTransport for HttpTransport {
    fn exchange(&self, request: &str, timeout: Duration) -> Result<String, ObjectiveError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        agent
            .post(&self.url)
            .set("Content-Type", "text/plain")
            .send_string(request)
            .map_err(|e| ObjectiveError::ScorerUnavailable(e.to_string()))?
            .into_string()
            .map_err(|e| ObjectiveError::ScorerUnavailable(e.to_string()))
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}

/// Runs `command` with `input` on stdin, returning (exit success, stdout).
/// The child is killed when `timeout` elapses.
pub(crate) fn run_with_timeout(
    command: &[String],
    extra_args: &[String],
    input: &[u8],
    timeout: Duration,
) -> Result<(bool, String), String> {
    let (program, args) = command.split_first().ok_or("empty command")?;
    let mut child = Command::new(program)
        .args(args)
        .args(extra_args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("spawn `{program}`: {e}"))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = child.stdout.take().expect("piped stdout");
    let payload = input.to_vec();
    let writer = thread::spawn(move || {
        // A child that exits without reading yields a broken pipe; the exit
        // status reports the failure.
        let _ = stdin.write_all(&payload);
    });
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let res = stdout.read_to_end(&mut buf).map(|_| buf);
        let _ = tx.send(res);
    });
    let out = match rx.recv_timeout(timeout) {
        Ok(Ok(buf)) => buf,
        Ok(Err(e)) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(format!("read stdout: {e}"));
        }
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(format!("timed out after {timeout:?}"));
        }
    };
    let _ = writer.join();
    let status = child.wait().map_err(|e| e.to_string())?;
    Ok((status.success(), String::from_utf8_lossy(&out).into_owned()))
}

pub enum ScorerKind {
    Builtin(Vec<Surrogate>),
    External { transport: Box<dyn ScoreTransport>, gate: Mutex<()> },
}

pub struct ScorerBinding {
    kind: ScorerKind,
    specs: Vec<ObjectiveSpec>,
    timeout: Duration,
}

pub type ScoreOutcome = Result<ScoreVector, ObjectiveError>;

impl ScorerBinding {
    pub fn builtin<S: AsRef<str>>(names: &[S]) -> Result<Self, ObjectiveError> {
        let suite = names.iter().map(|n| Surrogate::from_name(n.as_ref())).collect::<Result<Vec<_>, _>>()?;
        let specs: Vec<ObjectiveSpec> = suite.iter().map(|s| s.spec()).collect();
        Self::check_specs(&specs)?;
        Ok(Self { kind: ScorerKind::Builtin(suite), specs, timeout: Duration::ZERO })
    }

    /// All five surrogates in their documented order.
    pub fn builtin_suite() -> Self {
        Self::builtin(&Surrogate::ALL.map(Surrogate::name)).expect("builtin suite is well formed")
    }

    pub fn external(
        transport: Box<dyn ScoreTransport>,
        specs: Vec<ObjectiveSpec>,
        timeout: Duration,
    ) -> Result<Self, ObjectiveError> {
        Self::check_specs(&specs)?;
        Ok(Self { kind: ScorerKind::External { transport, gate: Mutex::new(()) }, specs, timeout })
    }

    fn check_specs(specs: &[ObjectiveSpec]) -> Result<(), ObjectiveError> {
        if specs.len() < 2 {
            return Err(ObjectiveError::TooFewObjectives(specs.len()));
        }
        validate_registry(specs)?;
        Ok(())
    }

    pub fn specs(&self) -> &[ObjectiveSpec] {
        &self.specs
    }

    pub fn k(&self) -> usize {
        self.specs.len()
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            ScorerKind::Builtin(suite) => {
                format!("builtin:{}", suite.iter().map(|s| s.name()).collect::<Vec<_>>().join(","))
            }
            ScorerKind::External { transport, .. } => transport.describe(),
        }
    }

    pub fn is_builtin(&self) -> bool {
        matches!(self.kind, ScorerKind::Builtin(_))
    }

    pub fn score(&self, g: &Genotype) -> ScoreOutcome {
        self.score_batch(std::slice::from_ref(g)).remove(0)
    }

    /// Scores every genotype, preserving order. External scorers get exactly
    /// one round trip per call; a failed entry does not affect the others.
    pub fn score_batch(&self, gs: &[Genotype]) -> Vec<ScoreOutcome> {
        if gs.is_empty() {
            return Vec::new();
        }
        match &self.kind {
            ScorerKind::Builtin(suite) => gs
                .iter()
                .map(|g| {
                    if !validate(g.text()) {
                        return Err(ObjectiveError::InvalidGenotype);
                    }
                    let raw = suite.iter().map(|s| s.raw(g.text())).collect();
                    Ok(ScoreVector::from_raw(&self.specs, raw)?)
                })
                .collect(),
            ScorerKind::External { transport, gate } => {
                let request = encode_request(gs);
                let reply = {
                    let _held = gate.lock().unwrap_or_else(|p| p.into_inner());
                    transport.exchange(&request, self.timeout)
                };
                match reply.and_then(|r| decode_reply(&r, gs.len(), self.k())) {
                    Ok(rows) => rows
                        .into_iter()
                        .map(|row| match row {
                            Ok((true, raw)) => ScoreVector::from_raw(&self.specs, raw)
                                .map_err(|e| ObjectiveError::ScorerUnavailable(e.to_string())),
                            Ok((false, _)) => Err(ObjectiveError::InvalidGenotype),
                            Err(e) => Err(e),
                        })
                        .collect(),
                    Err(e) => vec![Err(e); gs.len()],
                }
            }
        }
    }
}

pub fn encode_request(gs: &[Genotype]) -> String {
    let mut out = String::new();
    for (i, g) in gs.iter().enumerate() {
        out.push_str(&format!("SCORE {i} {}\n", g.text()));
    }
    out.push_str("END\n");
    out
}

type ReplyRow = Result<(bool, Vec<f64>), ObjectiveError>;

/// Parses a reply for ids `0..n`. A missing `END` fails the whole batch; a
/// malformed or missing line fails only its own id.
pub fn decode_reply(reply: &str, n: usize, k: usize) -> Result<Vec<ReplyRow>, ObjectiveError> {
    let mut rows: Vec<Option<ReplyRow>> = vec![None; n];
    let mut ended = false;
    for line in reply.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "END" {
            ended = true;
            break;
        }
        let mut fields = line.split_whitespace();
        if fields.next() != Some("RESULT") {
            continue;
        }
        let Some(id) = fields.next().and_then(|s| s.parse::<usize>().ok()).filter(|&i| i < n) else {
            continue;
        };
        if rows[id].is_some() {
            continue;
        }
        rows[id] = Some(parse_result_fields(fields.collect(), k));
    }
    if !ended {
        return Err(ObjectiveError::ScorerUnavailable("reply missing END sentinel".into()));
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.unwrap_or_else(|| Err(ObjectiveError::ScorerUnavailable(format!("no result for id {i}")))))
        .collect())
}

fn parse_result_fields(fields: Vec<&str>, k: usize) -> ReplyRow {
    let bad = |why: String| Err(ObjectiveError::ScorerUnavailable(why));
    let Some((flag, scores)) = fields.split_first() else {
        return bad("empty RESULT line".into());
    };
    let valid = match *flag {
        "0" => false,
        "1" => true,
        other => return bad(format!("bad validity flag `{other}`")),
    };
    if !valid {
        return Ok((false, Vec::new()));
    }
    if scores.len() != k {
        return bad(format!("expected {k} scores, got {}", scores.len()));
    }
    let raw = scores
        .iter()
        .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>();
    match raw {
        Some(raw) => Ok((true, raw)),
        None => bad("unparsable score".into()),
    }
}
