//! Episode-level scoring on top of precomputed step signals.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::Embedder;
use crate::risk::{actor_decomposition, prefix_scores, tail_risk, tracer_score, PrefixK, RiskVector, TracerParams};
use crate::signals::{compute_step_signals, SignalConfig, SignalError, StepSignals};
use crate::trajectory::{Actor, Outcome, TrajectoryRecord};

/// A trajectory reduced to what scoring needs. Signals do not depend on θ,
/// so one preparation serves every parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub episode_id: String,
    pub outcome: Option<Outcome>,
    pub actors: Vec<Actor>,
    pub signals: Vec<StepSignals>,
}

impl PreparedEpisode {
    pub fn prepare<E: Embedder + ?Sized>(
        traj: &TrajectoryRecord,
        cfg: &SignalConfig,
        emb: &E,
    ) -> Result<Self, SignalError> {
        Ok(Self {
            episode_id: traj.episode_id.clone(),
            outcome: traj.outcome,
            actors: traj.actors(),
            signals: compute_step_signals(traj, cfg, emb)?,
        })
    }

    pub fn is_failure(&self) -> Option<bool> {
        self.outcome.map(Outcome::is_failure)
    }

    pub fn risk_vector(&self, p: &TracerParams) -> RiskVector {
        RiskVector::from_signals(&self.signals, &self.actors, p)
    }

    pub fn tracer(&self, p: &TracerParams) -> f64 {
        tracer_score(&self.risk_vector(p), p)
    }

    pub fn score(&self, p: &TracerParams) -> EpisodeScore {
        let r = self.risk_vector(p);
        let (agent, user) = actor_decomposition(&r);
        EpisodeScore {
            episode_id: self.episode_id.clone(),
            score: tracer_score(&r, p),
            score_agent: tail_risk(&agent, p.k, p.w),
            score_user: tail_risk(&user, p.k, p.w),
            n_steps: r.len(),
            argmax_step: r.argmax_step().unwrap_or(0),
        }
    }

    pub fn prefix_scores(&self, p: &TracerParams, mode: PrefixK) -> Vec<f64> {
        prefix_scores(&self.risk_vector(p), p, mode)
    }
}

/// Computes signals for all trajectories in parallel, preserving input order.
pub fn prepare_episodes<E: Embedder + ?Sized>(
    trajs: &[TrajectoryRecord],
    cfg: &SignalConfig,
    emb: &E,
) -> Result<Vec<PreparedEpisode>, SignalError> {
    trajs
        .par_iter()
        .map(|t| PreparedEpisode::prepare(t, cfg, emb))
        .collect()
}

pub fn score_all(episodes: &[PreparedEpisode], p: &TracerParams) -> Vec<f64> {
    episodes.par_iter().map(|e| e.tracer(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub score: f64,
    pub score_agent: f64,
    pub score_user: f64,
    pub n_steps: usize,
    /// 1-based; 0 for an empty trajectory.
    pub argmax_step: usize,
}

pub const SCORE_CSV_HEADER: &str = "episode_id,score,score_agent,score_user,n_steps,argmax_step";
pub const PREFIX_CSV_HEADER: &str = "episode_id,step,score";

/// Floats are written in shortest round-trip form, so reading the file back
/// yields bit-identical values.
pub fn write_scores_csv<W: Write>(writer: W, scores: &[EpisodeScore]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in scores {
        w.serialize(s)?;
    }
    if scores.is_empty() {
        w.write_record(SCORE_CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> csv::Result<Vec<EpisodeScore>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub episode_id: String,
    pub step: usize,
    pub score: f64,
}

pub fn write_prefix_csv<W: Write>(writer: W, rows: &[(String, Vec<f64>)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREFIX_CSV_HEADER.split(','))?;
    for (id, scores) in rows {
        for (i, s) in scores.iter().enumerate() {
            w.write_record([id.as_str(), &(i + 1).to_string(), &s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Groups prefix rows by episode in file order. Steps must run 1, 2, … within
/// each episode.
pub fn read_prefix_csv<R: Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>, String> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize::<PrefixRow>() {
        let row = row.map_err(|e| e.to_string())?;
        match out.last_mut() {
            Some((id, scores)) if *id == row.episode_id => {
                if row.step != scores.len() + 1 {
                    return Err(format!("episode {id}: step {} out of order", row.step));
                }
                scores.push(row.score);
            }
            _ => {
                if out.iter().any(|(id, _)| *id == row.episode_id) {
                    return Err(format!("episode {} is not contiguous", row.episode_id));
                }
                if row.step != 1 {
                    return Err(format!("episode {}: first step is {}", row.episode_id, row.step));
                }
                out.push((row.episode_id, vec![row.score]));
            }
        }
    }
    Ok(out)
}
