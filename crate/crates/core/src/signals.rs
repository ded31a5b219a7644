//! Per-step uncertainty signals.
//!
//! * `u`: content-filtered normalized surprisal of the step's tokens.
//! * `d_rep`: hybrid repetition against the recent agent turns (agent steps).
//! * `d_o_agent`: action/observation gap at tool calls.
//! * `d_o_user`: gap between an agent message and the user reply to it.
//!
//! Every quantity for step `t` is computed from steps `1..=t` only; the
//! single-step functions take the history slice ending at the step of
//! interest, so later steps are unreachable by construction.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::embeddings::{cosine_similarity, Embedder, EmbeddingError, EmbeddingVector};
use crate::text::{self, is_numeric_token, StopWords};
use crate::trajectory::{Actor, StepRecord, TokenLogProb, TrajectoryRecord};

pub const DEFAULT_PI0: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_WINDOW: usize = 6;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid signal config: {0}")]
    Config(String),
    #[error("step {step}: {message}")]
    Contract { step: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Filters deciding which generated tokens carry content.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFilterConfig {
    pub stopwords: Arc<StopWords>,
    /// Tokens with probability above this are treated as structural.
    pub pi0: f64,
    /// Surprisal reported when no token passes the filters.
    pub epsilon: f64,
}

impl ContentFilterConfig {
    pub fn new(stopwords: StopWords, pi0: f64, epsilon: f64) -> Result<Self, SignalError> {
        let cfg = Self {
            stopwords: Arc::new(stopwords),
            pi0,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.pi0 > 0.0 && self.pi0 < 1.0) {
            return Err(SignalError::Config(format!("pi0 must lie in (0,1), got {}", self.pi0)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SignalError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.stopwords.is_empty() {
            return Err(SignalError::Config("stop-word list is empty".into()));
        }
        Ok(())
    }
}

impl Default for ContentFilterConfig {
    fn default() -> Self {
        Self {
            stopwords: Arc::new(StopWords::english()),
            pi0: DEFAULT_PI0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepetitionConfig {
    /// Number of most recent prior agent turns compared against.
    pub window: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalConfig {
    pub content: ContentFilterConfig,
    pub repetition: RepetitionConfig,
}

impl SignalConfig {
    /// Reads `pi0`, `epsilon`, `window` and `stopwords` (a file path).
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let stopwords = match cfg.get("stopwords") {
            None => StopWords::english(),
            Some(path) => StopWords::from_file(Path::new(path)).map_err(|source| ConfigError::Io {
                path: path.to_string(),
                source,
            })?,
        };
        let invalid = |e: SignalError| ConfigError::Invalid {
            key: "signals".into(),
            message: e.to_string(),
        };
        let content = ContentFilterConfig::new(
            stopwords,
            cfg.parsed_or("pi0", DEFAULT_PI0)?,
            cfg.parsed_or("epsilon", DEFAULT_EPSILON)?,
        )
        .map_err(invalid)?;
        let window: usize = cfg.parsed_or("window", DEFAULT_WINDOW)?;
        if window == 0 {
            return Err(invalid(SignalError::Config("window must be at least 1".into())));
        }
        Ok(Self {
            content,
            repetition: RepetitionConfig { window },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSignals {
    /// Normalized surprisal; `None` when the step carries no log-probabilities.
    pub u: Option<f64>,
    pub d_rep: f64,
    pub d_o_agent: f64,
    pub d_o_user: f64,
    pub agent_gap_available: bool,
    pub user_gap_available: bool,
}

impl Default for StepSignals {
    fn default() -> Self {
        Self {
            u: None,
            d_rep: 0.0,
            d_o_agent: 0.0,
            d_o_user: 0.0,
            agent_gap_available: false,
            user_gap_available: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSignal {
    pub value: f64,
    pub available: bool,
}

impl GapSignal {
    const UNAVAILABLE: GapSignal = GapSignal {
        value: 0.0,
        available: false,
    };
}

/// Content predicate for a single token. Tokens are trimmed and lowercased
/// before the stop-word and numeric checks; the probability check happens in
/// log space so `p == pi0` is included exactly.
pub fn is_content_token(tok: &TokenLogProb, cfg: &ContentFilterConfig) -> bool {
    let norm = tok.token.trim().to_lowercase();
    tok.logprob <= cfg.pi0.ln() && !cfg.stopwords.contains(&norm) && !is_numeric_token(&norm)
}

/// Zero-based positions of the content-bearing tokens.
pub fn content_token_indices(tokens: &[TokenLogProb], cfg: &ContentFilterConfig) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| is_content_token(t, cfg))
        .map(|(j, _)| j)
        .collect()
}

/// Mean surprisal over content tokens, or `epsilon` when there are none.
pub fn normalized_surprisal(tokens: &[TokenLogProb], cfg: &ContentFilterConfig) -> f64 {
    let (sum, count) = tokens
        .iter()
        .filter(|t| is_content_token(t, cfg))
        .fold((0.0, 0usize), |(s, n), t| (s - t.logprob, n + 1));
    if count == 0 {
        cfg.epsilon
    } else {
        sum / count as f64
    }
}

pub fn content_tokens(text: &str, cfg: &ContentFilterConfig) -> BTreeSet<String> {
    text::content_tokens(text, &cfg.stopwords)
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard overlap of the content-token sets; 0 when both are empty.
pub fn lexical_jaccard(u: &str, v: &str, cfg: &ContentFilterConfig) -> f64 {
    jaccard(&content_tokens(u, cfg), &content_tokens(v, cfg))
}

fn semantic_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SignalError> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Cached per-step inputs to the situational signals.
struct StepFeatures {
    text: EmbeddingVector,
    observation: Option<EmbeddingVector>,
    content: BTreeSet<String>,
}

fn features_for<E: Embedder + ?Sized>(
    steps: &[StepRecord],
    cfg: &ContentFilterConfig,
    emb: &E,
) -> Result<Vec<StepFeatures>, SignalError> {
    let mut texts: Vec<&str> = steps.iter().map(|s| s.text.as_str()).collect();
    let obs_slots: Vec<Option<usize>> = steps
        .iter()
        .map(|s| match (&s.observation_text, s.is_tool_call) {
            (Some(o), true) => {
                texts.push(o.as_str());
                Some(texts.len() - 1)
            }
            _ => None,
        })
        .collect();
    let mut vectors: Vec<Option<EmbeddingVector>> =
        emb.embed_batch(&texts)?.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        out.push(StepFeatures {
            text: vectors[i].take().expect("one vector per text"),
            observation: obs_slots[i].map(|j| vectors[j].take().expect("one vector per text")),
            content: content_tokens(&step.text, cfg),
        });
    }
    Ok(out)
}

/// Repetition at the last step of `steps`, which must be an agent step.
fn repetition_at(steps: &[StepRecord], feats: &[StepFeatures], window: usize) -> Result<f64, SignalError> {
    let t = steps.len() - 1;
    let current = &feats[t];
    let mut best: f64 = 0.0;
    let prior = steps[..t]
        .iter()
        .enumerate()
        .rev()
        .filter(|(_, s)| s.actor == Actor::Agent)
        .take(window);
    for (j, _) in prior {
        let sem = cosine_similarity(&current.text, &feats[j].text)?;
        let lex = jaccard(&current.content, &feats[j].content);
        best = best.max((sem * lex).max(0.0));
    }
    Ok(best.min(1.0))
}

fn agent_gap_at(feat: &StepFeatures) -> Result<GapSignal, SignalError> {
    match &feat.observation {
        None => Ok(GapSignal::UNAVAILABLE),
        Some(obs) => Ok(GapSignal {
            value: semantic_distance(&feat.text, obs)?,
            available: true,
        }),
    }
}

fn user_gap_at(steps: &[StepRecord], feats: &[StepFeatures]) -> Result<GapSignal, SignalError> {
    let t = steps.len() - 1;
    if t == 0 || steps[t - 1].actor != Actor::Agent {
        return Ok(GapSignal::UNAVAILABLE);
    }
    Ok(GapSignal {
        value: semantic_distance(&feats[t - 1].text, &feats[t].text)?,
        available: true,
    })
}

fn last_step(history: &[StepRecord]) -> Result<&StepRecord, SignalError> {
    history.last().ok_or_else(|| SignalError::Contract {
        step: 0,
        message: "empty history".into(),
    })
}

/// Hybrid repetition for the last step of `history`.
///
/// The maximum of `sim_sem * sim_lex` over the `cfg.repetition.window` most
/// recent earlier agent turns, clamped to `[0, 1]`; zero with no earlier agent
/// turn.
pub fn hybrid_repetition<E: Embedder + ?Sized>(
    history: &[StepRecord],
    cfg: &SignalConfig,
    emb: &E,
) -> Result<f64, SignalError> {
    let step = last_step(history)?;
    if step.actor != Actor::Agent {
        return Err(SignalError::Contract {
            step: history.len(),
            message: "repetition is defined for agent steps only".into(),
        });
    }
    let feats = features_for(history, &cfg.content, emb)?;
    repetition_at(history, &feats, cfg.repetition.window)
}

/// Action/observation gap for the last step of `history`, a tool call.
///
/// A tool call without observation text yields an unavailable 0.
pub fn coherence_gap_agent<E: Embedder + ?Sized>(
    history: &[StepRecord],
    emb: &E,
) -> Result<GapSignal, SignalError> {
    let step = last_step(history)?;
    if !step.is_tool_call {
        return Err(SignalError::Contract {
            step: history.len(),
            message: "agent coherence gap is defined for tool calls only".into(),
        });
    }
    match &step.observation_text {
        None => Ok(GapSignal::UNAVAILABLE),
        Some(obs) => Ok(GapSignal {
            value: semantic_distance(&emb.embed(&step.text)?, &emb.embed(obs)?)?,
            available: true,
        }),
    }
}

/// Gap between the previous agent message and the user reply that ends
/// `history`. Unavailable (0) when the previous step is missing or not an
/// agent step.
pub fn coherence_gap_user<E: Embedder + ?Sized>(
    history: &[StepRecord],
    emb: &E,
) -> Result<GapSignal, SignalError> {
    let step = last_step(history)?;
    if step.actor != Actor::User {
        return Err(SignalError::Contract {
            step: history.len(),
            message: "user coherence gap is defined for user steps only".into(),
        });
    }
    let t = history.len() - 1;
    if t == 0 || history[t - 1].actor != Actor::Agent {
        return Ok(GapSignal::UNAVAILABLE);
    }
    Ok(GapSignal {
        value: semantic_distance(&emb.embed(&history[t - 1].text)?, &emb.embed(&step.text)?)?,
        available: true,
    })
}

fn signals_at(
    steps: &[StepRecord],
    feats: &[StepFeatures],
    cfg: &SignalConfig,
) -> Result<StepSignals, SignalError> {
    let step = steps.last().expect("non-empty prefix");
    let mut s = StepSignals {
        u: step
            .token_logprobs
            .as_deref()
            .filter(|t| !t.is_empty())
            .map(|t| normalized_surprisal(t, &cfg.content)),
        ..StepSignals::default()
    };
    match step.actor {
        Actor::Agent => {
            s.d_rep = repetition_at(steps, feats, cfg.repetition.window)?;
            if step.is_tool_call {
                let gap = agent_gap_at(&feats[steps.len() - 1])?;
                s.d_o_agent = gap.value;
                s.agent_gap_available = gap.available;
            }
        }
        Actor::User => {
            let gap = user_gap_at(steps, feats)?;
            s.d_o_user = gap.value;
            s.user_gap_available = gap.available;
        }
    }
    Ok(s)
}

/// Signals for every step of a trajectory. Each text and observation is
/// embedded once.
pub fn compute_step_signals<E: Embedder + ?Sized>(
    traj: &TrajectoryRecord,
    cfg: &SignalConfig,
    emb: &E,
) -> Result<Vec<StepSignals>, SignalError> {
    let feats = features_for(&traj.steps, &cfg.content, emb)?;
    (1..=traj.steps.len())
        .map(|t| signals_at(&traj.steps[..t], &feats[..t], cfg))
        .collect()
}

pub const SIGNAL_CSV_HEADER: &str = "step,actor,u,u_available,d_rep,d_o_agent,d_o_user";

/// Writes the per-step debug dump. Unavailable `u` is written as 0.
pub fn write_signal_csv<W: Write>(
    writer: W,
    actors: &[Actor],
    signals: &[StepSignals],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SIGNAL_CSV_HEADER.split(','))?;
    for (i, (actor, s)) in actors.iter().zip(signals).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            actor.as_str().to_string(),
            s.u.unwrap_or(0.0).to_string(),
            s.u.is_some().to_string(),
            s.d_rep.to_string(),
            s.d_o_agent.to_string(),
            s.d_o_user.to_string(),
        ])?;
    }
    w.flush()
}
