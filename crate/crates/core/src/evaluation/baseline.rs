//! Normalized-entropy baseline: mean negative log-probability over every
//! generated token of a trajectory, with no content filtering.

use crate::trajectory::TrajectoryRecord;

/// Running baseline score after each step; steps without log-probabilities
/// leave the running value unchanged (0 until the first token).
pub fn normalized_entropy_prefixes(t: &TrajectoryRecord) -> Vec<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    t.steps
        .iter()
        .map(|s| {
            for tok in s.token_logprobs.iter().flatten() {
                sum -= tok.logprob;
                count += 1;
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

pub fn normalized_entropy(t: &TrajectoryRecord) -> f64 {
    normalized_entropy_prefixes(t).last().copied().unwrap_or(0.0)
}
