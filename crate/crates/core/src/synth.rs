//! Synthetic agent/user dialogues with planted hazards.
//!
//! Normal turns draw content words from a task vocabulary and stay on topic:
//! tool observations echo the call's arguments and user replies echo the
//! agent. Hazards break that structure:
//!
//! * `loop`: the agent repeats its previous message nearly verbatim, and keeps
//!   doing so for `loop_persist` more turns.
//! * `tool_mismatch`: a tool observation drawn from a disjoint vocabulary.
//! * `coordination_gap`: a user reply drawn from the same disjoint vocabulary.
//!
//! Each eligible step hosts a hazard with probability `hazard_density`. A
//! hazard step gets a latent condition `C_t ~ U(0.5, 1]`; every other step has
//! `C_t = 0`, and an episode fails iff some `C_t > 0`.
//!
//! Agent tokens carry log-probabilities. At each content position a true
//! distribution `Q` and a model distribution `P = (1 - m) Q + m N` are drawn
//! over a few candidate words; the emitted word is sampled from `Q` and scored
//! under `P`. The mismatch `m` rises on the agent turn that follows an
//! incoherent observation or reply.
//!
//! Episode `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `i`, so
//! output does not depend on thread scheduling.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::embeddings::Embedder;
use crate::risk::{tail_k_count, TracerParams};
use crate::scoring::prepare_episodes;
use crate::signals::{SignalConfig, SignalError};
use crate::trajectory::{Actor, Outcome, StepRecord, TokenLogProb, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Spec(String),
    #[error("invalid oracle: {0}")]
    Oracle(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HazardKind {
    Loop,
    ToolMismatch,
    CoordinationGap,
    None,
}

impl HazardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HazardKind::Loop => "loop",
            HazardKind::ToolMismatch => "tool_mismatch",
            HazardKind::CoordinationGap => "coordination_gap",
            HazardKind::None => "none",
        }
    }
}

impl fmt::Display for HazardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HazardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "loop" => Ok(HazardKind::Loop),
            "tool_mismatch" => Ok(HazardKind::ToolMismatch),
            "coordination_gap" => Ok(HazardKind::CoordinationGap),
            "none" => Ok(HazardKind::None),
            other => Err(format!("unknown hazard kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub episodes: usize,
    /// Episode length in steps, uniform on `[min_len, max_len]`.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an agent turn following a user turn is a tool call.
    /// A tool call is always followed by an agent turn; other agent turns are
    /// followed by the user.
    pub tool_call_rate: f64,
    pub hazard_kinds: Vec<HazardKind>,
    pub hazard_density: f64,
    pub max_hazards_per_episode: Option<usize>,
    /// Extra agent turns that keep repeating after a loop starts.
    pub loop_persist: usize,
    /// Probability that a plain agent turn is a benign recap of the previous
    /// one: partly repetitive and less predictable, but not a hazard.
    pub benign_rate: f64,
    pub base_mismatch: f64,
    pub hazard_mismatch: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            episodes: 1000,
            min_len: 20,
            max_len: 40,
            tool_call_rate: 0.4,
            hazard_kinds: vec![HazardKind::Loop, HazardKind::ToolMismatch, HazardKind::CoordinationGap],
            hazard_density: 0.05,
            max_hazards_per_episode: None,
            loop_persist: 2,
            benign_rate: 0.0,
            base_mismatch: 0.2,
            hazard_mismatch: 0.7,
            seed: 7,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] is empty or starts at 0", self.min_len, self.max_len));
        }
        for (name, v) in [
            ("hazard_density", self.hazard_density),
            ("tool_call_rate", self.tool_call_rate),
            ("benign_rate", self.benign_rate),
            ("base_mismatch", self.base_mismatch),
            ("hazard_mismatch", self.hazard_mismatch),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        let active = self.active_kinds();
        if self.hazard_density > 0.0 && active.is_empty() {
            return bad("hazard_density > 0 needs at least one hazard kind other than none".into());
        }
        if active.len() < self.hazard_kinds.len() && !active.is_empty() {
            return bad("hazard kind none cannot be combined with other kinds".into());
        }
        Ok(())
    }

    fn active_kinds(&self) -> Vec<HazardKind> {
        let mut k: Vec<HazardKind> = self
            .hazard_kinds
            .iter()
            .copied()
            .filter(|&k| k != HazardKind::None)
            .collect();
        k.sort();
        k.dedup();
        k
    }

    /// Reads the fields under their own names; `hazard_kinds` is a
    /// comma-separated list and `max_hazards_per_episode = 0` means no cap.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let kinds = match cfg.get("hazard_kinds") {
            None => d.hazard_kinds.clone(),
            Some(raw) => raw
                .split(',')
                .map(|s| s.parse())
                .collect::<Result<Vec<HazardKind>, String>>()
                .map_err(|reason| ConfigError::Value {
                    key: "hazard_kinds".into(),
                    value: raw.into(),
                    reason,
                })?,
        };
        let cap: usize = cfg.parsed_or("max_hazards_per_episode", 0)?;
        let spec = Self {
            episodes: cfg.parsed_or("episodes", d.episodes)?,
            min_len: cfg.parsed_or("min_len", d.min_len)?,
            max_len: cfg.parsed_or("max_len", d.max_len)?,
            tool_call_rate: cfg.parsed_or("tool_call_rate", d.tool_call_rate)?,
            hazard_kinds: kinds,
            hazard_density: cfg.parsed_or("hazard_density", d.hazard_density)?,
            max_hazards_per_episode: (cap > 0).then_some(cap),
            loop_persist: cfg.parsed_or("loop_persist", d.loop_persist)?,
            benign_rate: cfg.parsed_or("benign_rate", d.benign_rate)?,
            base_mismatch: cfg.parsed_or("base_mismatch", d.base_mismatch)?,
            hazard_mismatch: cfg.parsed_or("hazard_mismatch", d.hazard_mismatch)?,
            seed: cfg.parsed_or("seed", d.seed)?,
        };
        spec.validate().map_err(|e| ConfigError::Invalid {
            key: "scenario".into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }
}

/// Maps step risk to hazard probability, `lambda = min(1, c r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardModel {
    pub c: f64,
}

impl HazardModel {
    pub fn new(c: f64) -> Result<Self, SynthError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(SynthError::Spec(format!("dominance constant c must be > 0, got {c}")));
        }
        Ok(Self { c })
    }

    pub fn hazard(&self, r: f64) -> f64 {
        (self.c * r).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardAnnotation {
    pub episode_id: String,
    /// 1-based step index.
    pub step: usize,
    pub kind: HazardKind,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub trajectories: Vec<TrajectoryRecord>,
    pub annotations: Vec<HazardAnnotation>,
}

impl SynthDataset {
    pub fn stats(&self) -> DatasetStats {
        let failures = self
            .trajectories
            .iter()
            .filter(|t| t.outcome == Some(Outcome::Failure))
            .count();
        let steps: usize = self.trajectories.iter().map(|t| t.steps.len()).sum();
        let count = |k| self.annotations.iter().filter(|a| a.kind == k).count();
        DatasetStats {
            episodes: self.trajectories.len(),
            failures,
            mean_len: steps as f64 / self.trajectories.len().max(1) as f64,
            loops: count(HazardKind::Loop),
            tool_mismatches: count(HazardKind::ToolMismatch),
            coordination_gaps: count(HazardKind::CoordinationGap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub episodes: usize,
    pub failures: usize,
    pub mean_len: f64,
    pub loops: usize,
    pub tool_mismatches: usize,
    pub coordination_gaps: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episodes {} (failures {}), mean length {:.1}, hazards: loop {}, tool_mismatch {}, coordination_gap {}",
            self.episodes, self.failures, self.mean_len, self.loops, self.tool_mismatches, self.coordination_gaps
        )
    }
}

pub const ANNOTATION_CSV_HEADER: &str = "episode_id,step,hazard_kind,C_t";

pub fn write_annotations_csv<W: Write>(writer: W, rows: &[HazardAnnotation]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ANNOTATION_CSV_HEADER.split(','))?;
    for a in rows {
        w.write_record([
            a.episode_id.as_str(),
            &a.step.to_string(),
            a.kind.as_str(),
            &a.condition.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn word_list(raw: &'static str) -> Vec<&'static str> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

struct Vocab {
    domain: Vec<&'static str>,
    alien: Vec<&'static str>,
    stop: Vec<&'static str>,
}

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| Vocab {
        domain: word_list(include_str!("../data/domain_words.txt")),
        alien: word_list(include_str!("../data/alien_words.txt")),
        stop: vec![
            "the", "a", "to", "for", "your", "i", "will", "is", "of", "and", "it", "on", "with", "can", "this",
        ],
    })
}

const GREETINGS: &[&str] = &[
    "hello thanks for contacting us how can i help you",
    "hi there what can i do for you",
    "hello how may i help you",
];
const LOOP_PREFIX: &str = "ok";
const CANDIDATES: usize = 5;

fn pick<'a, R: Rng>(rng: &mut R, list: &[&'a str]) -> &'a str {
    list[rng.random_range(0..list.len())]
}

fn entity_code<R: Rng>(rng: &mut R) -> String {
    let a = (b'a' + rng.random_range(0..26u8)) as char;
    let b = (b'a' + rng.random_range(0..26u8)) as char;
    format!("{a}{b}{}", rng.random_range(100..1000))
}

/// Dirichlet(1) draw, sharpened by squaring.
fn random_simplex<R: Rng>(rng: &mut R, n: usize, sharpen: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            let g = -(1.0 - rng.random::<f64>()).ln();
            if sharpen {
                g * g
            } else {
                g
            }
        })
        .map(|x| x.max(1e-12))
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn sample_index<R: Rng>(rng: &mut R, q: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in q.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    q.len() - 1
}

/// A generated turn: words plus, for agent turns, their log-probabilities.
#[derive(Clone)]
struct Turn {
    words: Vec<String>,
    logprobs: Vec<f64>,
    content: Vec<String>,
}

impl Turn {
    fn text(&self) -> String {
        self.words.join(" ")
    }

    fn tokens(&self) -> Vec<TokenLogProb> {
        self.words
            .iter()
            .zip(&self.logprobs)
            .map(|(w, &l)| TokenLogProb::new(w.clone(), l))
            .collect()
    }
}

struct TurnBuilder {
    turn: Turn,
}

impl TurnBuilder {
    fn new() -> Self {
        Self {
            turn: Turn {
                words: Vec::new(),
                logprobs: Vec::new(),
                content: Vec::new(),
            },
        }
    }

    fn stop<R: Rng>(&mut self, rng: &mut R, word: &str) {
        self.turn.words.push(word.to_string());
        self.turn.logprobs.push(rng.random_range(0.92f64..0.999).ln());
    }

    fn maybe_stop<R: Rng>(&mut self, rng: &mut R) {
        if rng.random_bool(0.6) {
            let w = pick(rng, &vocab().stop);
            self.stop(rng, w);
        }
    }

    /// A content word sampled from `Q` over candidates from `pool`, scored
    /// under the mismatched `P`.
    fn sampled<R: Rng>(&mut self, rng: &mut R, pool: &[&str], mismatch: f64) {
        let cands: Vec<&str> = (0..CANDIDATES).map(|_| pick(rng, pool)).collect();
        let q = random_simplex(rng, CANDIDATES, true);
        let noise = random_simplex(rng, CANDIDATES, false);
        let j = sample_index(rng, &q);
        let p = (1.0 - mismatch) * q[j] + mismatch * noise[j];
        self.content_word(cands[j].to_string(), p.ln());
    }

    fn content_word(&mut self, word: String, logprob: f64) {
        self.turn.content.push(word.clone());
        self.turn.words.push(word);
        self.turn.logprobs.push(logprob);
    }

    fn code<R: Rng>(&mut self, rng: &mut R, code: String) {
        let lp = rng.random_range(0.05f64..0.6).ln();
        self.content_word(code, lp);
    }

    fn finish(self) -> Turn {
        self.turn
    }
}

struct EpisodeGen<'a> {
    spec: &'a ScenarioSpec,
    rng: ChaCha8Rng,
    id: String,
    steps: Vec<StepRecord>,
    annotations: Vec<HazardAnnotation>,
    last_plain: Option<Turn>,
    last_agent_content: Vec<String>,
    last_agent_words: Vec<String>,
    loop_turn: Option<Turn>,
    loop_remaining: usize,
    elevated: bool,
}

impl EpisodeGen<'_> {
    fn plant(&mut self, kind: HazardKind) {
        let condition = 1.0 - 0.5 * self.rng.random::<f64>();
        self.annotations.push(HazardAnnotation {
            episode_id: self.id.clone(),
            step: self.steps.len() + 1,
            kind,
            condition,
        });
    }

    /// Decides whether this step hosts a hazard, choosing among the eligible
    /// kinds uniformly.
    fn draw_hazard(&mut self, eligible: &[HazardKind]) -> Option<HazardKind> {
        let kinds: Vec<HazardKind> = self
            .spec
            .active_kinds()
            .into_iter()
            .filter(|k| eligible.contains(k))
            .collect();
        if kinds.is_empty() || self.spec.hazard_density == 0.0 {
            return None;
        }
        if let Some(cap) = self.spec.max_hazards_per_episode {
            if self.annotations.len() >= cap {
                return None;
            }
        }
        if !self.rng.random_bool(self.spec.hazard_density) {
            return None;
        }
        Some(kinds[self.rng.random_range(0..kinds.len())])
    }

    fn mismatch(&mut self) -> f64 {
        if std::mem::take(&mut self.elevated) {
            self.spec.hazard_mismatch
        } else {
            self.spec.base_mismatch
        }
    }

    fn greeting(&mut self) {
        let g = pick(&mut self.rng, GREETINGS);
        let mut b = TurnBuilder::new();
        for w in g.split(' ') {
            b.stop(&mut self.rng, w);
        }
        let t = b.finish();
        self.push_agent(&t, None);
    }

    fn push_agent(&mut self, t: &Turn, observation: Option<Option<String>>) {
        let mut s = StepRecord::new(self.steps.len() + 1, Actor::Agent, t.text()).with_logprobs(t.tokens());
        if let Some(obs) = observation {
            s = s.tool_call(obs);
        }
        self.last_agent_content = t.content.clone();
        self.last_agent_words = t.words.clone();
        self.steps.push(s);
    }

    fn plain_turn(&mut self, echo: &[String]) -> Turn {
        let m = self.mismatch();
        let rng = &mut self.rng;
        let mut b = TurnBuilder::new();
        for w in echo.iter().take(2) {
            b.maybe_stop(rng);
            b.content_word(w.clone(), rng.random_range(0.2f64..0.8).ln());
        }
        for _ in 0..rng.random_range(3..7) {
            b.maybe_stop(rng);
            b.sampled(rng, &vocab().domain, m);
        }
        if rng.random_bool(0.3) {
            b.maybe_stop(rng);
            let c = entity_code(rng);
            b.code(rng, c);
        }
        b.finish()
    }

    /// Recap of the previous plain turn: most of its content words again plus
    /// a few new ones, at raised mismatch.
    fn benign_turn(&mut self, prev: &Turn) -> Turn {
        let m = self.spec.hazard_mismatch.max(self.spec.base_mismatch) * 0.7;
        let rng = &mut self.rng;
        let mut b = TurnBuilder::new();
        for w in &prev.content {
            if rng.random_bool(0.6) {
                b.maybe_stop(rng);
                b.content_word(w.clone(), rng.random_range(0.1f64..0.6).ln());
            }
        }
        for _ in 0..rng.random_range(2..4) {
            b.maybe_stop(rng);
            b.sampled(rng, &vocab().domain, m);
        }
        b.finish()
    }

    fn agent_plain(&mut self, echo: &[String]) {
        if let Some(t) = self.loop_turn.clone().filter(|_| self.loop_remaining > 0) {
            self.loop_remaining -= 1;
            self.push_agent(&t, None);
            return;
        }
        let loop_ok = self.last_plain.is_some();
        let hazard = self.draw_hazard(if loop_ok { &[HazardKind::Loop] } else { &[] });
        if hazard == Some(HazardKind::Loop) {
            let prev = self.last_plain.clone().expect("loop needs an earlier turn");
            let mut b = TurnBuilder::new();
            b.stop(&mut self.rng, LOOP_PREFIX);
            // Repetition is confident: each repeated token is highly probable.
            for w in &prev.words {
                let lp = self.rng.random_range(0.85f64..0.99).ln();
                if prev.content.contains(w) {
                    b.content_word(w.clone(), lp);
                } else {
                    b.turn.words.push(w.clone());
                    b.turn.logprobs.push(lp);
                }
            }
            let t = b.finish();
            self.plant(HazardKind::Loop);
            self.loop_turn = Some(t.clone());
            self.loop_remaining = self.spec.loop_persist;
            self.push_agent(&t, None);
            return;
        }
        let t = match self.last_plain.clone() {
            Some(prev) if self.spec.benign_rate > 0.0 && self.rng.random_bool(self.spec.benign_rate) => {
                self.benign_turn(&prev)
            }
            _ => self.plain_turn(echo),
        };
        self.last_plain = Some(t.clone());
        self.push_agent(&t, None);
    }

    fn agent_tool_call(&mut self) {
        let m = self.mismatch();
        let rng = &mut self.rng;
        let mut b = TurnBuilder::new();
        for _ in 0..rng.random_range(2..5) {
            b.sampled(rng, &vocab().domain, m);
        }
        let code = entity_code(rng);
        b.code(rng, code.clone());
        let t = b.finish();

        let hazard = self.draw_hazard(&[HazardKind::ToolMismatch]);
        let rng = &mut self.rng;
        let obs: Vec<String> = if hazard.is_some() {
            (0..rng.random_range(4..9)).map(|_| pick(rng, &vocab().alien).to_string()).collect()
        } else {
            let mut o: Vec<String> = t.content.iter().filter(|_| rng.random_bool(0.8)).cloned().collect();
            if !o.contains(&code) {
                o.push(code);
            }
            for _ in 0..rng.random_range(1..4) {
                o.push(pick(rng, &vocab().domain).to_string());
            }
            o
        };
        if let Some(k) = hazard {
            self.plant(k);
            self.elevated = true;
        }
        self.push_agent(&t, Some(Some(obs.join(" "))));
    }

    fn user(&mut self) {
        let hazard = self.draw_hazard(&[HazardKind::CoordinationGap]);
        let rng = &mut self.rng;
        let mut words: Vec<String> = Vec::new();
        if hazard.is_some() {
            for _ in 0..rng.random_range(3..8) {
                words.push(pick(rng, &vocab().alien).to_string());
            }
        } else {
            let echo: &[String] = if self.last_agent_content.is_empty() {
                &self.last_agent_words
            } else {
                &self.last_agent_content
            };
            for _ in 0..rng.random_range(3..5).min(echo.len()) {
                if rng.random_bool(0.6) {
                    words.push(pick(rng, &vocab().stop).to_string());
                }
                words.push(echo[rng.random_range(0..echo.len())].clone());
            }
            for _ in 0..rng.random_range(1..3) {
                if rng.random_bool(0.6) {
                    words.push(pick(rng, &vocab().stop).to_string());
                }
                words.push(pick(rng, &vocab().domain).to_string());
            }
        }
        if let Some(k) = hazard {
            self.plant(k);
            self.elevated = true;
        }
        self.steps
            .push(StepRecord::new(self.steps.len() + 1, Actor::User, words.join(" ")));
    }

    fn run(mut self, len: usize) -> (TrajectoryRecord, Vec<HazardAnnotation>) {
        self.greeting();
        while self.steps.len() < len {
            let last = self.steps.last().expect("greeting present");
            match (last.actor, last.is_tool_call) {
                (Actor::Agent, false) => self.user(),
                (Actor::Agent, true) => {
                    let echo: Vec<String> = last
                        .observation_text
                        .as_deref()
                        .unwrap_or("")
                        .split(' ')
                        .filter(|w| !w.is_empty())
                        .map(str::to_string)
                        .collect();
                    self.agent_plain(&echo);
                }
                (Actor::User, _) => {
                    let tool = self.loop_remaining == 0 && self.rng.random_bool(self.spec.tool_call_rate);
                    if tool {
                        self.agent_tool_call();
                    } else {
                        let echo = self.steps.last().map(|s| {
                            s.text.split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect::<Vec<_>>()
                        });
                        self.agent_plain(&echo.unwrap_or_default());
                    }
                }
            }
        }
        let failed = self.annotations.iter().any(|a| a.condition > 0.0);
        let traj = TrajectoryRecord {
            episode_id: self.id,
            outcome: Some(Outcome::from_failed(failed)),
            steps: self.steps,
        };
        (traj, self.annotations)
    }
}

fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `spec.episodes` labeled trajectories and their hazard
/// annotations. Identical specs give identical output.
pub fn generate(spec: &ScenarioSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let results: Vec<(TrajectoryRecord, Vec<HazardAnnotation>)> = (0..spec.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(spec.seed, i);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            EpisodeGen {
                spec,
                rng,
                id: format!("ep{i:05}"),
                steps: Vec::with_capacity(len),
                annotations: Vec::new(),
                last_plain: None,
                last_agent_content: Vec::new(),
                last_agent_words: Vec::new(),
                loop_turn: None,
                loop_remaining: 0,
                elevated: false,
            }
            .run(len)
        })
        .collect();
    let mut trajectories = Vec::with_capacity(results.len());
    let mut annotations = Vec::new();
    for (t, a) in results {
        trajectories.push(t);
        annotations.extend(a);
    }
    Ok(SynthDataset {
        trajectories,
        annotations,
    })
}

/// True and model distributions at one content position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDist {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurprisalParts {
    /// Mean entropy of `Q` over positions.
    pub entropy: f64,
    /// Mean `KL(Q || P)` over positions.
    pub kl: f64,
    pub total: f64,
}

/// Per-position `(Q, P)` pairs over a small vocabulary. Expected surprisal of
/// a token drawn from `Q` and scored under `P` is `H(Q) + KL(Q || P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisalOracle {
    positions: Vec<PositionDist>,
}

impl SurprisalOracle {
    pub fn new(positions: Vec<PositionDist>) -> Result<Self, SynthError> {
        if positions.is_empty() {
            return Err(SynthError::Oracle("no positions".into()));
        }
        for (j, d) in positions.iter().enumerate() {
            let bad = |m: String| Err(SynthError::Oracle(format!("position {j}: {m}")));
            if d.q.len() != d.p.len() || d.q.is_empty() {
                return bad("Q and P must share a non-empty vocabulary".into());
            }
            for (name, v) in [("Q", &d.q), ("P", &d.p)] {
                if v.iter().any(|&x| x.is_nan() || x < 0.0) {
                    return bad(format!("{name} has a negative entry"));
                }
                let s: f64 = v.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return bad(format!("{name} sums to {s}"));
                }
            }
            if d.q.iter().zip(&d.p).any(|(&q, &p)| q > 0.0 && p == 0.0) {
                return bad("Q puts mass where P is zero".into());
            }
        }
        Ok(Self { positions })
    }

    /// Random oracle with `n` positions over `vocab` symbols, every `P` entry
    /// capped at `max_p` by mixing with the uniform distribution.
    pub fn random<R: Rng>(rng: &mut R, n: usize, vocab: usize, max_p: f64) -> Self {
        let uniform = 1.0 / vocab as f64;
        let positions = (0..n)
            .map(|_| {
                let q = random_simplex(rng, vocab, true);
                let raw = random_simplex(rng, vocab, true);
                let top = raw.iter().copied().fold(0.0, f64::max);
                let p = if top > max_p {
                    let lam = (max_p - uniform) / (top - uniform);
                    let mut p: Vec<f64> = raw.iter().map(|x| lam * x + (1.0 - lam) * uniform).collect();
                    let s: f64 = p.iter().sum();
                    p.iter_mut().for_each(|x| *x /= s);
                    p
                } else {
                    raw
                };
                PositionDist { q, p }
            })
            .collect();
        Self::new(positions).expect("constructed distributions are valid")
    }

    pub fn positions(&self) -> &[PositionDist] {
        &self.positions
    }

    pub fn expectation(&self) -> SurprisalParts {
        let n = self.positions.len() as f64;
        let (mut h, mut kl) = (0.0, 0.0);
        for d in &self.positions {
            for (&q, &p) in d.q.iter().zip(&d.p) {
                if q > 0.0 {
                    h -= q * q.ln();
                    kl += q * (q / p).ln();
                }
            }
        }
        let (entropy, kl) = (h / n, kl / n);
        SurprisalParts {
            entropy,
            kl,
            total: entropy + kl,
        }
    }

    /// One token per position, drawn from `Q` and scored under `P`. Symbols
    /// are named `sym<index>`.
    pub fn sample_tokens<R: Rng>(&self, rng: &mut R) -> Vec<TokenLogProb> {
        self.positions
            .iter()
            .map(|d| {
                let j = sample_index(rng, &d.q);
                TokenLogProb::new(format!("sym{j}"), d.p[j].ln())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub trials: usize,
    pub c: f64,
    /// Monte-Carlo estimate of the breakdown probability.
    pub p_breakdown: f64,
    pub std_error: f64,
    /// Mean over episodes of `K * TM_k`, the sum of the top-K step risks.
    pub mean_k_tm: f64,
    /// Largest observed sum of step risks below the top K.
    pub eta_hat: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Monte-Carlo check of `P(B) <= c E[K TM_k] + c eta`.
///
/// `trials` episodes are generated from `spec`, step risks are computed under
/// `params`, and each step independently triggers a condition with
/// probability `min(1, c r_t)`.
pub fn breakdown_bound_check<E: Embedder + ?Sized>(
    spec: &ScenarioSpec,
    params: &TracerParams,
    c: f64,
    trials: usize,
    signals: &SignalConfig,
    emb: &E,
) -> Result<BoundCheck, SynthError> {
    let model = HazardModel::new(c)?;
    if trials < 1000 {
        return Err(SynthError::Spec(format!("need at least 1000 trials, got {trials}")));
    }
    let spec = ScenarioSpec {
        episodes: trials,
        ..spec.clone()
    };
    let data = generate(&spec)?;
    let prepared = prepare_episodes(&data.trajectories, signals, emb)?;
    let per_episode: Vec<(bool, f64, f64)> = prepared
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let rv = ep.risk_vector(params);
            let mut rng = episode_rng(spec.seed ^ 0x5eed_b0d5, i);
            let mut broke = false;
            for s in rv.risks() {
                let lambda = model.hazard(s.r);
                assert!(lambda <= c * s.r + 1e-15, "hazard exceeds c * r");
                // Draw C_t for every step so the stream does not depend on outcomes.
                let u: f64 = rng.random();
                let cond = if u < lambda { 1.0 - 0.5 * rng.random::<f64>() } else { 0.0 };
                broke |= cond > 0.0;
            }
            let sorted = rv.sorted_desc();
            let k = tail_k_count(params.k, sorted.len());
            let top: f64 = sorted[..k].iter().sum();
            let below: f64 = sorted[k..].iter().sum();
            (broke, top, below)
        })
        .collect();
    let n = per_episode.len() as f64;
    let p_breakdown = per_episode.iter().filter(|e| e.0).count() as f64 / n;
    let std_error = (p_breakdown * (1.0 - p_breakdown) / n).sqrt();
    let mean_k_tm = per_episode.iter().map(|e| e.1).sum::<f64>() / n;
    let eta_hat = per_episode.iter().map(|e| e.2).fold(0.0, f64::max);
    let bound = c * mean_k_tm + c * eta_hat;
    Ok(BoundCheck {
        trials,
        c,
        p_breakdown,
        std_error,
        mean_k_tm,
        eta_hat,
        bound,
        holds: p_breakdown <= bound + 3.0 * std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::HashedBowEmbedder;
    use crate::signals::compute_step_signals;
    use crate::text::StopWords;
    use crate::trajectory::{validate_trajectory, write_trajectory_log};

    fn stopwords_are_disjoint(stop: &StopWords) -> bool {
        let v = vocab();
        v.domain.iter().chain(&v.alien).all(|w| !stop.contains(w)) && v.stop.iter().all(|w| stop.contains(w))
    }

    fn small(density: f64, kinds: Vec<HazardKind>) -> ScenarioSpec {
        ScenarioSpec {
            episodes: 60,
            hazard_density: density,
            hazard_kinds: kinds,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn vocabularies_are_disjoint_and_clean() {
        let stop = StopWords::english();
        assert!(stopwords_are_disjoint(&stop));
        let v = vocab();
        assert!(v.domain.len() >= 200);
        assert!(v.domain.iter().all(|w| !v.alien.contains(w)));
        assert!(stop.contains(LOOP_PREFIX));
    }

    #[test]
    fn zero_density_means_all_success() {
        let d = generate(&small(0.0, vec![HazardKind::Loop])).unwrap();
        assert!(d.annotations.is_empty());
        assert!(d.trajectories.iter().all(|t| t.outcome == Some(Outcome::Success)));
    }

    #[test]
    fn generated_trajectories_are_valid() {
        let d = generate(&small(0.05, ScenarioSpec::default().hazard_kinds)).unwrap();
        for t in &d.trajectories {
            assert!(validate_trajectory(t).is_empty(), "{:?}", validate_trajectory(t));
            assert!((20..=40).contains(&t.steps.len()));
            assert_eq!(t.steps[0].actor, Actor::Agent);
        }
        for a in &d.annotations {
            assert!(a.condition > 0.5 && a.condition <= 1.0);
        }
        let failed: usize = d.trajectories.iter().filter(|t| t.outcome == Some(Outcome::Failure)).count();
        assert!(failed > 0 && failed < d.trajectories.len());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small(0.05, ScenarioSpec::default().hazard_kinds);
        let dump = |d: &SynthDataset| {
            let mut buf = Vec::new();
            write_trajectory_log(&mut buf, &d.trajectories).unwrap();
            write_annotations_csv(&mut buf, &d.annotations).unwrap();
            buf
        };
        let a = dump(&generate(&spec).unwrap());
        assert_eq!(a, dump(&generate(&spec).unwrap()));
        let other = ScenarioSpec { seed: 8, ..spec };
        assert_ne!(a, dump(&generate(&other).unwrap()));
    }

    #[test]
    fn planted_loops_repeat_strongly() {
        let d = generate(&small(1.0, vec![HazardKind::Loop])).unwrap();
        let cfg = SignalConfig::default();
        let emb = HashedBowEmbedder::default();
        for t in &d.trajectories {
            let sig = compute_step_signals(t, &cfg, &emb).unwrap();
            let loops: Vec<&HazardAnnotation> =
                d.annotations.iter().filter(|a| a.episode_id == t.episode_id).collect();
            assert!(!loops.is_empty());
            for a in loops {
                assert!(sig[a.step - 1].d_rep >= 0.9, "{} step {}: {}", t.episode_id, a.step, sig[a.step - 1].d_rep);
            }
        }
    }

    #[test]
    fn mismatch_hazards_are_distant() {
        let d = generate(&small(0.3, vec![HazardKind::ToolMismatch, HazardKind::CoordinationGap])).unwrap();
        let cfg = SignalConfig::default();
        let emb = HashedBowEmbedder::default();
        let mut gaps = Vec::new();
        for t in &d.trajectories {
            let sig = compute_step_signals(t, &cfg, &emb).unwrap();
            for a in d.annotations.iter().filter(|a| a.episode_id == t.episode_id) {
                let s = sig[a.step - 1];
                gaps.push(match a.kind {
                    HazardKind::ToolMismatch => s.d_o_agent,
                    _ => s.d_o_user,
                });
            }
        }
        // Disjoint words only meet through hash collisions.
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(gaps.len() > 50 && mean > 0.98 && min > 0.7, "n {} mean {mean} min {min}", gaps.len());
    }

    #[test]
    fn hazard_cap_is_respected() {
        let spec = ScenarioSpec {
            max_hazards_per_episode: Some(1),
            ..small(0.5, ScenarioSpec::default().hazard_kinds)
        };
        let d = generate(&spec).unwrap();
        for t in &d.trajectories {
            assert!(d.annotations.iter().filter(|a| a.episode_id == t.episode_id).count() <= 1);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate(&small(0.1, vec![HazardKind::None])).is_err());
        assert!(generate(&small(0.0, vec![HazardKind::None])).is_ok());
        assert!(generate(&small(1.5, vec![HazardKind::Loop])).is_err());
        let kv = KvConfig::parse("episodes = 5\nhazard_kinds = loop, tool_mismatch\nmax_hazards_per_episode = 1").unwrap();
        let s = ScenarioSpec::from_kv(&kv).unwrap();
        assert_eq!(s.hazard_kinds, vec![HazardKind::Loop, HazardKind::ToolMismatch]);
        assert_eq!(s.max_hazards_per_episode, Some(1));
        assert!(ScenarioSpec::from_kv(&KvConfig::parse("hazard_kinds = drift").unwrap()).is_err());
    }

    #[test]
    fn annotation_csv() {
        let mut buf = Vec::new();
        write_annotations_csv(
            &mut buf,
            &[HazardAnnotation {
                episode_id: "ep00001".into(),
                step: 3,
                kind: HazardKind::Loop,
                condition: 0.75,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "episode_id,step,hazard_kind,C_t\nep00001,3,loop,0.75\n");
    }

    #[test]
    fn oracle_examples() {
        let uniform = PositionDist {
            q: vec![0.25; 4],
            p: vec![0.25; 4],
        };
        let e = SurprisalOracle::new(vec![uniform]).unwrap().expectation();
        assert!((e.entropy - 4f64.ln()).abs() < 1e-12 && e.kl.abs() < 1e-12);

        let point = PositionDist {
            q: vec![1.0, 0.0],
            p: vec![1.0, 0.0],
        };
        assert_eq!(SurprisalOracle::new(vec![point]).unwrap().expectation().total, 0.0);

        let d = PositionDist {
            q: vec![0.5, 0.5],
            p: vec![0.9, 0.1],
        };
        let e = SurprisalOracle::new(vec![d]).unwrap().expectation();
        assert!((e.entropy - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((e.kl - 0.510_825_623_765_990_7).abs() < 1e-12);
        assert!((e.total - 1.203_972_804_325_936).abs() < 1e-12);

        let bad = PositionDist {
            q: vec![0.5, 0.5],
            p: vec![1.0, 0.0],
        };
        assert!(matches!(SurprisalOracle::new(vec![bad]), Err(SynthError::Oracle(_))));
    }

    #[test]
    fn random_oracle_respects_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let o = SurprisalOracle::random(&mut rng, 4, 6, 0.95);
            for d in o.positions() {
                assert!(d.p.iter().all(|&p| p <= 0.95 + 1e-12));
            }
        }
    }

    #[test]
    fn bound_check_degenerate_cases() {
        let cfg = SignalConfig::default();
        let emb = HashedBowEmbedder::default();
        let spec = ScenarioSpec {
            min_len: 4,
            max_len: 6,
            ..ScenarioSpec::default()
        };
        let p = TracerParams::default();
        let tiny = breakdown_bound_check(&spec, &p, 1e-12, 1000, &cfg, &emb).unwrap();
        assert_eq!(tiny.p_breakdown, 0.0);
        assert!(tiny.holds && tiny.bound < 1e-9);
        assert!(breakdown_bound_check(&spec, &p, 0.0, 1000, &cfg, &emb).is_err());
        assert!(breakdown_bound_check(&spec, &p, 0.5, 10, &cfg, &emb).is_err());
    }
}
