//! Step risks and the tail aggregation.
//!
//! A step's risk is the largest of four weighted components. A trajectory's
//! risk vector is summarized by `(1 - w) * TM_k + w * max`, where `TM_k` is
//! the mean of the `K = max(1, floor(k N))` largest step risks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::signals::StepSignals;
use crate::trajectory::Actor;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracerParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k: f64,
    pub w: f64,
}

impl Default for TracerParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            k: 0.2,
            w: 0.25,
        }
    }
}

impl TracerParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, k: f64, w: f64) -> Result<Self, ParamError> {
        let p = Self {
            alpha,
            beta,
            gamma,
            k,
            w,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let nonneg = |name, value: f64| {
            if value >= 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ParamError::OutOfRange {
                    name,
                    value,
                    range: "[0, inf)",
                })
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("beta", self.beta)?;
        nonneg("gamma", self.gamma)?;
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(ParamError::OutOfRange {
                name: "k",
                value: self.k,
                range: "(0, 1]",
            });
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(ParamError::OutOfRange {
                name: "w",
                value: self.w,
                range: "[0, 1]",
            });
        }
        Ok(())
    }

    /// Reads `alpha`, `beta`, `gamma`, `k` and `w`, defaulting missing keys.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let p = Self {
            alpha: cfg.parsed_or("alpha", d.alpha)?,
            beta: cfg.parsed_or("beta", d.beta)?,
            gamma: cfg.parsed_or("gamma", d.gamma)?,
            k: cfg.parsed_or("k", d.k)?,
            w: cfg.parsed_or("w", d.w)?,
        };
        p.validate().map_err(|e| ConfigError::Invalid {
            key: "params".into(),
            message: e.to_string(),
        })?;
        Ok(p)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut cfg = KvConfig::default();
        cfg.set("alpha", self.alpha.to_string());
        cfg.set("beta", self.beta.to_string());
        cfg.set("gamma", self.gamma.to_string());
        cfg.set("k", self.k.to_string());
        cfg.set("w", self.w.to_string());
        cfg
    }
}

/// The four weighted component risks of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepComponents {
    pub uncertainty: f64,
    pub repetition: f64,
    pub agent_gap: f64,
    pub user_gap: f64,
}

impl StepComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.uncertainty, self.repetition, self.agent_gap, self.user_gap]
    }
}

pub fn step_components(s: &StepSignals, actor: Actor, p: &TracerParams) -> StepComponents {
    StepComponents {
        uncertainty: s.u.unwrap_or(0.0),
        repetition: p.alpha * s.d_rep,
        agent_gap: if actor == Actor::Agent { p.beta * s.d_o_agent } else { 0.0 },
        user_gap: if actor == Actor::User { p.gamma * s.d_o_user } else { 0.0 },
    }
}

/// Pointwise maximum of the components.
pub fn step_risk(c: &StepComponents) -> f64 {
    c.as_array().into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRisk {
    pub components: StepComponents,
    pub r: f64,
    pub actor: Actor,
    pub r_agent_part: f64,
    pub r_user_part: f64,
}

impl StepRisk {
    pub fn new(components: StepComponents, actor: Actor) -> Self {
        let r = step_risk(&components);
        let (r_agent_part, r_user_part) = match actor {
            Actor::Agent => (r, 0.0),
            Actor::User => (0.0, r),
        };
        Self {
            components,
            r,
            actor,
            r_agent_part,
            r_user_part,
        }
    }
}

fn desc(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

/// Step risks of one trajectory plus their descending order statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskVector {
    risks: Vec<StepRisk>,
    sorted: Vec<f64>,
}

impl RiskVector {
    pub fn new(risks: Vec<StepRisk>) -> Self {
        let mut sorted: Vec<f64> = risks.iter().map(|s| s.r).collect();
        sorted.sort_by(desc);
        Self { risks, sorted }
    }

    pub fn from_signals(signals: &[StepSignals], actors: &[Actor], p: &TracerParams) -> Self {
        assert_eq!(signals.len(), actors.len(), "one actor per step");
        Self::new(
            signals
                .iter()
                .zip(actors)
                .map(|(s, &a)| StepRisk::new(step_components(s, a, p), a))
                .collect(),
        )
    }

    pub fn risks(&self) -> &[StepRisk] {
        &self.risks
    }

    pub fn values(&self) -> Vec<f64> {
        self.risks.iter().map(|s| s.r).collect()
    }

    pub fn sorted_desc(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    /// 1-based index of the first step attaining the maximum risk.
    pub fn argmax_step(&self) -> Option<usize> {
        let max = *self.sorted.first()?;
        self.risks.iter().position(|s| s.r == max).map(|i| i + 1)
    }
}

pub fn tail_k_count(k: f64, n: usize) -> usize {
    // The small offset keeps products such as 0.29 * 100 from flooring to 28.
    let floor = (k * n as f64 + 1e-9).floor() as usize;
    floor.clamp(1, n.max(1))
}

/// Mean of the first `count` entries of a descending slice.
fn top_mean(sorted_desc: &[f64], count: usize) -> f64 {
    if count == 0 {
        return 0.0;
    }
    sorted_desc[..count].iter().sum::<f64>() / count as f64
}

/// Tail mean of an already descending-sorted vector; 0 for an empty one.
pub fn tail_mean_sorted(sorted_desc: &[f64], k: f64) -> f64 {
    if sorted_desc.is_empty() {
        return 0.0;
    }
    top_mean(sorted_desc, tail_k_count(k, sorted_desc.len()))
}

pub fn tail_mean(values: &[f64], k: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(desc);
    tail_mean_sorted(&sorted, k)
}

/// `(1 - w) * TM_k(r) + w * max(r)` on a raw vector.
pub fn tail_risk(values: &[f64], k: f64, w: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(desc);
    tail_risk_sorted(&sorted, k, w)
}

fn tail_risk_sorted(sorted_desc: &[f64], k: f64, w: f64) -> f64 {
    match sorted_desc.first() {
        None => 0.0,
        Some(&max) => (1.0 - w) * tail_mean_sorted(sorted_desc, k) + w * max,
    }
}

pub fn tracer_score(r: &RiskVector, p: &TracerParams) -> f64 {
    tail_risk_sorted(&r.sorted, p.k, p.w)
}

/// Splits the step risks by actor: each step's risk goes to the vector of the
/// actor who produced it, the other vector holding 0 at that step.
pub fn actor_decomposition(r: &RiskVector) -> (Vec<f64>, Vec<f64>) {
    r.risks
        .iter()
        .map(|s| (s.r_agent_part, s.r_user_part))
        .unzip()
}

/// How the tail count is chosen for a prefix of length `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefixK {
    /// `K_t = max(1, floor(k t))`.
    #[default]
    PerPrefix,
    /// `K` fixed at the full-length value, capped by `t`.
    Frozen,
}

/// Scores of every prefix `1..=t`, reusing the step risks.
pub fn prefix_scores(r: &RiskVector, p: &TracerParams, mode: PrefixK) -> Vec<f64> {
    let n = r.len();
    let frozen_k = tail_k_count(p.k, n);
    let mut sorted: Vec<f64> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for (i, step) in r.risks.iter().enumerate() {
        let pos = sorted.partition_point(|&x| x >= step.r);
        sorted.insert(pos, step.r);
        let t = i + 1;
        let k_t = match mode {
            PrefixK::PerPrefix => tail_k_count(p.k, t),
            PrefixK::Frozen => frozen_k.min(t),
        };
        out.push((1.0 - p.w) * top_mean(&sorted, k_t) + p.w * sorted[0]);
    }
    out
}
