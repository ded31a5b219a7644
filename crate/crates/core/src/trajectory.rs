//! Dual-control trajectories: the in-memory model and the line-delimited log
//! format.
//!
//! A log holds one JSON record per line:
//!
//! ```text
//! {"episode_id":"e1","outcome":1,"steps":[{"actor":"agent","text":"...",
//!   "observation_text":null,"is_tool_call":false,"token_logprobs":[["tok",-0.3]]}]}
//! ```
//!
//! Log-probabilities are natural logs. Values above zero (raw probabilities,
//! or anything that is not a log-probability) are rejected rather than
//! converted. Step indices present in a file are advisory; the canonical index
//! of a step is its 1-based position.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Agent,
    User,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Agent => "agent",
            Actor::User => "user",
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Episode outcome; serialized as `0` (success) or `1` (failure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn is_failure(self) -> bool {
        self == Outcome::Failure
    }

    pub fn from_failed(failed: bool) -> Self {
        if failed {
            Outcome::Failure
        } else {
            Outcome::Success
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            Outcome::Success => 0,
            Outcome::Failure => 1,
        })
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(Outcome::Success),
            1 => Ok(Outcome::Failure),
            other => Err(serde::de::Error::custom(format!(
                "outcome must be 0, 1 or null, got {other}"
            ))),
        }
    }
}

/// A generated token and its natural-log probability. Serialized as a
/// `[token, logprob]` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, f64)", into = "(String, f64)")]
pub struct TokenLogProb {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogProb {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }

    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }
}

impl From<(String, f64)> for TokenLogProb {
    fn from((token, logprob): (String, f64)) -> Self {
        Self { token, logprob }
    }
}

impl From<TokenLogProb> for (String, f64) {
    fn from(t: TokenLogProb) -> Self {
        (t.token, t.logprob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based position in the trajectory.
    #[serde(skip)]
    pub index: usize,
    pub actor: Actor,
    pub text: String,
    pub observation_text: Option<String>,
    pub is_tool_call: bool,
    pub token_logprobs: Option<Vec<TokenLogProb>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl StepRecord {
    pub fn new(index: usize, actor: Actor, text: impl Into<String>) -> Self {
        Self {
            index,
            actor,
            text: text.into(),
            observation_text: None,
            is_tool_call: false,
            token_logprobs: None,
            timestamp: None,
        }
    }

    pub fn tool_call(mut self, observation: Option<String>) -> Self {
        self.is_tool_call = true;
        self.observation_text = observation;
        self
    }

    pub fn with_logprobs(mut self, tokens: Vec<TokenLogProb>) -> Self {
        self.token_logprobs = Some(tokens);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub outcome: Option<Outcome>,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actors(&self) -> Vec<Actor> {
        self.steps.iter().map(|s| s.actor).collect()
    }

    /// Serializes to a single JSON line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory records always serialize")
    }
}

/// Which invariant a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvariantKind {
    EmptyEpisodeId,
    NoSteps,
    StepIndexSequence,
    ToolCallByUser,
    EmptyTokenList,
    LogprobPositive,
    LogprobNotFinite,
}

impl InvariantKind {
    pub fn describe(self) -> &'static str {
        match self {
            InvariantKind::EmptyEpisodeId => "episode_id non-empty",
            InvariantKind::NoSteps => "trajectory has at least one step",
            InvariantKind::StepIndexSequence => "step indices strictly increasing by 1",
            InvariantKind::ToolCallByUser => "tool calls are agent steps",
            InvariantKind::EmptyTokenList => "token_logprobs non-empty when present",
            InvariantKind::LogprobPositive => "logprob ≤ 0",
            InvariantKind::LogprobNotFinite => "logprob finite",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// 1-based step position, `None` for record-level violations.
    pub step: Option<usize>,
    pub kind: InvariantKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(step) => write!(f, "step {step}: {}", self.kind.describe())?,
            None => write!(f, "{}", self.kind.describe())?,
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Checks every type invariant of a trajectory.
///
/// The returned list is empty iff the trajectory is well formed. Each entry
/// names the offending step (1-based position) and the invariant.
pub fn validate_trajectory(t: &TrajectoryRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.episode_id.is_empty() {
        out.push(Violation {
            step: None,
            kind: InvariantKind::EmptyEpisodeId,
            detail: String::new(),
        });
    }
    if t.steps.is_empty() {
        out.push(Violation {
            step: None,
            kind: InvariantKind::NoSteps,
            detail: String::new(),
        });
    }
    for (pos, step) in t.steps.iter().enumerate() {
        let expected = pos + 1;
        if step.index != expected {
            out.push(Violation {
                step: Some(expected),
                kind: InvariantKind::StepIndexSequence,
                detail: format!("found index {}", step.index),
            });
        }
        if step.is_tool_call && step.actor == Actor::User {
            out.push(Violation {
                step: Some(expected),
                kind: InvariantKind::ToolCallByUser,
                detail: String::new(),
            });
        }
        if let Some(tokens) = &step.token_logprobs {
            if tokens.is_empty() {
                out.push(Violation {
                    step: Some(expected),
                    kind: InvariantKind::EmptyTokenList,
                    detail: String::new(),
                });
            }
            for tok in tokens {
                if !tok.logprob.is_finite() {
                    out.push(Violation {
                        step: Some(expected),
                        kind: InvariantKind::LogprobNotFinite,
                        detail: format!("token {:?}: {}", tok.token, tok.logprob),
                    });
                } else if tok.logprob > 0.0 {
                    out.push(Violation {
                        step: Some(expected),
                        kind: InvariantKind::LogprobPositive,
                        detail: format!("token {:?}: {}", tok.token, tok.logprob),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: invariant violated: {violation}")]
    Invariant { line: usize, violation: Violation },
    #[error("line {line}: duplicate episode_id {episode_id:?}")]
    DuplicateEpisode { line: usize, episode_id: String },
    #[error("i/o error reading trajectory log: {0}")]
    Io(#[from] std::io::Error),
}

impl LogError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LogError::Malformed { line, .. }
            | LogError::Schema { line, .. }
            | LogError::Invariant { line, .. }
            | LogError::DuplicateEpisode { line, .. } => Some(*line),
            LogError::Io(_) => None,
        }
    }
}

#[derive(Deserialize)]
struct RawStep {
    #[serde(default)]
    index: Option<i64>,
    actor: Actor,
    text: String,
    #[serde(default)]
    observation_text: Option<String>,
    is_tool_call: bool,
    #[serde(default)]
    token_logprobs: Option<Vec<TokenLogProb>>,
    #[serde(default)]
    timestamp: Option<u64>,
}

#[derive(Deserialize)]
struct RawRecord {
    episode_id: String,
    outcome: Option<Outcome>,
    steps: Vec<RawStep>,
}

/// Parses one log line. `line` is only used for error reporting.
pub fn parse_record(text: &str, line: usize) -> Result<TrajectoryRecord, LogError> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        if e.is_data() {
            LogError::Schema { line, message }
        } else {
            LogError::Malformed { line, message }
        }
    })?;

    // File indices are advisory: accept any strictly increasing numbering and
    // replace it with positions.
    let mut last: Option<i64> = None;
    for (pos, step) in raw.steps.iter().enumerate() {
        if let Some(idx) = step.index {
            if let Some(prev) = last {
                if idx <= prev {
                    return Err(LogError::Invariant {
                        line,
                        violation: Violation {
                            step: Some(pos + 1),
                            kind: InvariantKind::StepIndexSequence,
                            detail: format!("index {idx} follows {prev}"),
                        },
                    });
                }
            }
            last = Some(idx);
        }
    }

    let record = TrajectoryRecord {
        episode_id: raw.episode_id,
        outcome: raw.outcome,
        steps: raw
            .steps
            .into_iter()
            .enumerate()
            .map(|(pos, s)| StepRecord {
                index: pos + 1,
                actor: s.actor,
                text: s.text,
                observation_text: s.observation_text,
                is_tool_call: s.is_tool_call,
                token_logprobs: s.token_logprobs,
                timestamp: s.timestamp,
            })
            .collect(),
    };
    if let Some(violation) = validate_trajectory(&record).into_iter().next() {
        return Err(LogError::Invariant { line, violation });
    }
    Ok(record)
}

/// Reads a whole trajectory log. Blank lines are skipped; episode ids must be
/// unique within the file.
pub fn parse_trajectory_log<R: BufRead>(reader: R) -> Result<Vec<TrajectoryRecord>, LogError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, line_no)?;
        if !seen.insert(record.episode_id.clone()) {
            return Err(LogError::DuplicateEpisode {
                line: line_no,
                episode_id: record.episode_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_trajectory_file(path: &std::path::Path) -> Result<Vec<TrajectoryRecord>, LogError> {
    let file = std::fs::File::open(path)?;
    parse_trajectory_log(std::io::BufReader::new(file))
}

pub fn write_trajectory_log<W: Write>(
    mut writer: W,
    records: &[TrajectoryRecord],
) -> std::io::Result<()> {
    for r in records {
        writer.write_all(r.to_json_line().as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
