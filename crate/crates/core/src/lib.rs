//! Trajectory-level failure-risk scoring for dialogues in which an agent and a
//! user both act.
//!
//! The pipeline: parse a trajectory log ([`trajectory`]), compute per-step
//! signals ([`signals`]), combine them into step risks and a tail-aggregated
//! score ([`risk`], [`scoring`]), fit parameters on labeled data
//! ([`calibration`]) and measure ranking and early-warning quality
//! ([`evaluation`]). [`synth`] generates labeled data with planted hazards.

pub mod calibration;
pub mod config;
pub mod embeddings;
pub mod evaluation;
pub mod risk;
pub mod scoring;
pub mod signals;
pub mod synth;
pub mod text;
pub mod trajectory;

pub use risk::{PrefixK, RiskVector, TracerParams};
pub use scoring::{EpisodeScore, PreparedEpisode};
pub use signals::{SignalConfig, StepSignals};
pub use trajectory::{Actor, Outcome, StepRecord, TrajectoryRecord};

use thiserror::Error;

/// Union of the module errors, for callers that do not branch on the source.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Log(#[from] trajectory::LogError),
    #[error(transparent)]
    Embedding(#[from] embeddings::EmbeddingError),
    #[error(transparent)]
    Signal(#[from] signals::SignalError),
    #[error(transparent)]
    Param(#[from] risk::ParamError),
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
