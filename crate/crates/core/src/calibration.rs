//! Parameter fitting by pairwise logistic separation, and threshold choice.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::evaluation::{auroc, roc_curve, EvalError};
use crate::risk::TracerParams;
use crate::scoring::{score_all, PreparedEpisode};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no {0} episodes in the training data")]
    EmptyClass(&'static str),
    #[error("episode {0} has no outcome label")]
    Unlabeled(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over all (failure, success) pairs of `ln(1 + exp(-(s_f - s_s) / tau))`.
pub fn pairwise_logistic_loss(fail: &[f64], succ: &[f64], tau: f64) -> Result<f64, CalibrationError> {
    if fail.is_empty() {
        return Err(CalibrationError::EmptyClass("failed"));
    }
    if succ.is_empty() {
        return Err(CalibrationError::EmptyClass("successful"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(CalibrationError::Grid(format!("tau must be > 0, got {tau}")));
    }
    let total: f64 = fail
        .iter()
        .map(|&f| succ.iter().map(|&s| softplus(-(f - s) / tau)).sum::<f64>())
        .sum();
    Ok(total / (fail.len() * succ.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub k: Vec<f64>,
    /// Candidates for the final line search over `w`.
    pub w: Vec<f64>,
    /// `w` used while searching the other parameters.
    pub pilot_w: f64,
    pub levels: usize,
    pub shrink: f64,
    pub tau: f64,
}

const K_FLOOR: f64 = 0.01;

impl Default for GridSpec {
    fn default() -> Self {
        let weights = vec![0.0, 0.5, 1.0, 2.0, 4.0];
        Self {
            alpha: weights.clone(),
            beta: weights.clone(),
            gamma: weights,
            k: vec![0.1, 0.2, 0.3, 0.5, 1.0],
            w: (0..=20).map(|i| i as f64 / 20.0).collect(),
            pilot_w: 0.25,
            levels: 2,
            shrink: 0.5,
            tau: 0.1,
        }
    }
}

impl GridSpec {
    /// A grid whose only candidate is `p`.
    pub fn single(p: TracerParams) -> Self {
        Self {
            alpha: vec![p.alpha],
            beta: vec![p.beta],
            gamma: vec![p.gamma],
            k: vec![p.k],
            w: vec![p.w],
            pilot_w: p.w,
            ..Self::default()
        }
    }

    /// Reads `grid_alpha`, `grid_beta`, `grid_gamma`, `grid_k`, `grid_w`
    /// (comma-separated lists), `pilot_w`, `refine_levels`, `refine_shrink`
    /// and `tau`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let g = Self {
            alpha: cfg.list("grid_alpha")?.unwrap_or(d.alpha),
            beta: cfg.list("grid_beta")?.unwrap_or(d.beta),
            gamma: cfg.list("grid_gamma")?.unwrap_or(d.gamma),
            k: cfg.list("grid_k")?.unwrap_or(d.k),
            w: cfg.list("grid_w")?.unwrap_or(d.w),
            pilot_w: cfg.parsed_or("pilot_w", d.pilot_w)?,
            levels: cfg.parsed_or("refine_levels", d.levels)?,
            shrink: cfg.parsed_or("refine_shrink", d.shrink)?,
            tau: cfg.parsed_or("tau", d.tau)?,
        };
        g.validate().map_err(|e| ConfigError::Invalid {
            key: "grid".into(),
            message: e.to_string(),
        })?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::Grid(m));
        for (name, list) in [("alpha", &self.alpha), ("beta", &self.beta), ("gamma", &self.gamma), ("k", &self.k), ("w", &self.w)] {
            if list.is_empty() {
                return bad(format!("{name} list is empty"));
            }
        }
        for &a in self.alpha.iter().chain(&self.beta).chain(&self.gamma) {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("weight {a} is not a finite value >= 0"));
            }
        }
        if let Some(k) = self.k.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
            return bad(format!("k = {k} is outside (0, 1]"));
        }
        if let Some(w) = self.w.iter().chain([&self.pilot_w]).find(|&&w| !(0.0..=1.0).contains(&w)) {
            return bad(format!("w = {w} is outside [0, 1]"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad(format!("refine_shrink = {} is outside (0, 1)", self.shrink));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {} must be > 0", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub params: TracerParams,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub best: TracerParams,
    pub loss: f64,
    /// Every evaluated candidate, in evaluation order.
    pub surface: Vec<SurfacePoint>,
    pub validation_auroc: Option<f64>,
    pub n_train: usize,
    pub n_validation: usize,
}

impl CalibrationReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text.trim())
    }
}

fn labels_of(episodes: &[PreparedEpisode]) -> Result<Vec<bool>, CalibrationError> {
    episodes
        .iter()
        .map(|e| e.is_failure().ok_or_else(|| CalibrationError::Unlabeled(e.episode_id.clone())))
        .collect()
}

fn loss_at(episodes: &[PreparedEpisode], labels: &[bool], p: &TracerParams, tau: f64) -> Result<f64, CalibrationError> {
    let mut fail = Vec::new();
    let mut succ = Vec::new();
    for (e, &y) in episodes.iter().zip(labels) {
        let s = e.tracer(p);
        if y {
            fail.push(s);
        } else {
            succ.push(s);
        }
    }
    pairwise_logistic_loss(&fail, &succ, tau)
}

fn key(p: &TracerParams) -> [u64; 5] {
    [p.alpha, p.beta, p.gamma, p.k, p.w].map(f64::to_bits)
}

/// Lexicographic on (loss, alpha, beta, gamma, k, w).
fn better(a: &SurfacePoint, b: &SurfacePoint) -> bool {
    let ka = [a.loss, a.params.alpha, a.params.beta, a.params.gamma, a.params.k, a.params.w];
    let kb = [b.loss, b.params.alpha, b.params.beta, b.params.gamma, b.params.k, b.params.w];
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

struct Search<'a> {
    episodes: &'a [PreparedEpisode],
    labels: &'a [bool],
    tau: f64,
    seen: HashSet<[u64; 5]>,
    surface: Vec<SurfacePoint>,
}

impl Search<'_> {
    /// Evaluates the unseen candidates in parallel and returns the best point
    /// among `candidates` (seen ones included).
    fn evaluate(&mut self, candidates: Vec<TracerParams>) -> Result<Option<SurfacePoint>, CalibrationError> {
        let fresh: Vec<TracerParams> = candidates
            .iter()
            .filter(|p| self.seen.insert(key(p)))
            .copied()
            .collect();
        let losses: Vec<Result<f64, CalibrationError>> = fresh
            .par_iter()
            .map(|p| loss_at(self.episodes, self.labels, p, self.tau))
            .collect();
        for (p, l) in fresh.into_iter().zip(losses) {
            self.surface.push(SurfacePoint { params: p, loss: l? });
        }
        let wanted: HashSet<[u64; 5]> = candidates.iter().map(key).collect();
        let mut best: Option<SurfacePoint> = None;
        for pt in self.surface.iter().filter(|pt| wanted.contains(&key(&pt.params))) {
            if best.as_ref().is_none_or(|b| better(pt, b)) {
                best = Some(*pt);
            }
        }
        Ok(best)
    }
}

/// Distance from `v` to the nearest other value in `list`; 0 if there is none.
fn spacing(list: &[f64], v: f64) -> f64 {
    let d = list
        .iter()
        .filter(|&&x| x != v)
        .map(|x| (x - v).abs())
        .fold(f64::INFINITY, f64::min);
    if d.is_finite() {
        d
    } else {
        0.0
    }
}

fn around(v: f64, h: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(3);
    for x in [v - h, v, v + h] {
        let x = x.clamp(lo, hi);
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn product(a: &[f64], b: &[f64], g: &[f64], k: &[f64], w: f64) -> Vec<TracerParams> {
    let mut out = Vec::with_capacity(a.len() * b.len() * g.len() * k.len());
    for &alpha in a {
        for &beta in b {
            for &gamma in g {
                for &kk in k {
                    out.push(TracerParams { alpha, beta, gamma, k: kk, w });
                }
            }
        }
    }
    out
}

/// Coarse grid over (alpha, beta, gamma, k) at the pilot `w`, local
/// refinement around the incumbent, then a line search over `w`.
/// Deterministic for a given episode order and grid.
pub fn fit(train: &[PreparedEpisode], grid: &GridSpec) -> Result<CalibrationReport, CalibrationError> {
    grid.validate()?;
    let labels = labels_of(train)?;
    if !labels.iter().any(|&y| y) {
        return Err(CalibrationError::EmptyClass("failed"));
    }
    if labels.iter().all(|&y| y) {
        return Err(CalibrationError::EmptyClass("successful"));
    }
    let mut search = Search {
        episodes: train,
        labels: &labels,
        tau: grid.tau,
        seen: HashSet::new(),
        surface: Vec::new(),
    };
    let coarse = product(&grid.alpha, &grid.beta, &grid.gamma, &grid.k, grid.pilot_w);
    let mut best = search.evaluate(coarse)?.expect("grid is non-empty");

    let p0 = best.params;
    let mut h = [
        spacing(&grid.alpha, p0.alpha),
        spacing(&grid.beta, p0.beta),
        spacing(&grid.gamma, p0.gamma),
        spacing(&grid.k, p0.k),
    ];
    let weight_hi = f64::MAX;
    for _ in 0..grid.levels {
        h.iter_mut().for_each(|x| *x *= grid.shrink);
        let c = best.params;
        let candidates = product(
            &around(c.alpha, h[0], 0.0, weight_hi),
            &around(c.beta, h[1], 0.0, weight_hi),
            &around(c.gamma, h[2], 0.0, weight_hi),
            &around(c.k, h[3], K_FLOOR.min(c.k), 1.0),
            grid.pilot_w,
        );
        best = search.evaluate(candidates)?.expect("incumbent is a candidate");
    }

    let mut line: Vec<TracerParams> = grid.w.iter().map(|&w| TracerParams { w, ..best.params }).collect();
    line.push(best.params);
    let best = search.evaluate(line)?.expect("line search is non-empty");
    Ok(CalibrationReport {
        best: best.params,
        loss: best.loss,
        surface: search.surface,
        validation_auroc: None,
        n_train: train.len(),
        n_validation: 0,
    })
}

/// [`fit`] on `train`, then AUROC of the fitted score on `validation` when it
/// holds both classes.
pub fn fit_with_validation(
    train: &[PreparedEpisode],
    validation: &[PreparedEpisode],
    grid: &GridSpec,
) -> Result<CalibrationReport, CalibrationError> {
    let mut report = fit(train, grid)?;
    report.n_validation = validation.len();
    if !validation.is_empty() {
        let labels = labels_of(validation)?;
        let scores = score_all(validation, &report.best);
        report.validation_auroc = auroc(&scores, &labels).ok();
    }
    Ok(report)
}

/// Seeded shuffle of `0..n` split into (train, validation) index lists, both
/// returned in ascending order.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * validation_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Youden-optimal threshold. Among distinct scores `v` (failure predicted for
/// `score >= v`), picks the one maximizing TPR - FPR, preferring the lower
/// threshold on ties, and returns the midpoint between it and the next lower
/// distinct score (or the score itself when it is the lowest).
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64, CalibrationError> {
    let roc = roc_curve(scores, labels)?;
    let points = &roc[1..];
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.tpr - p.fpr >= points[best].tpr - points[best].fpr {
            best = i;
        }
    }
    let v = points[best].threshold;
    Ok(match points.get(best + 1) {
        Some(next) => (v + next.threshold) / 2.0,
        None => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::StepSignals;
    use crate::trajectory::{Actor, Outcome};
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((pairwise_logistic_loss(&[1.0], &[1.0], 0.1).unwrap() - ln2).abs() < 1e-15);
        assert!(pairwise_logistic_loss(&[1e6], &[0.0], 0.1).unwrap() < 1e-300);
        let l = pairwise_logistic_loss(&[2.0], &[1.0], 1.0).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12, "{l}");
        // Large negative margins stay finite.
        assert!((pairwise_logistic_loss(&[0.0], &[1e6], 0.1).unwrap() - 1e7).abs() < 1e-3);
        assert!(matches!(pairwise_logistic_loss(&[], &[1.0], 1.0), Err(CalibrationError::EmptyClass("failed"))));
        assert!(matches!(pairwise_logistic_loss(&[1.0], &[], 1.0), Err(CalibrationError::EmptyClass("successful"))));
    }

    #[test]
    fn threshold_examples() {
        let labels = [true, true, false, false];
        assert_eq!(select_threshold(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 0.5);
        assert_eq!(select_threshold(&[0.4; 4], &labels).unwrap(), 0.4);
        assert!(select_threshold(&[0.4, 0.5], &[true, true]).is_err());
    }

    fn episode(id: &str, failed: bool, d_rep: &[f64]) -> PreparedEpisode {
        PreparedEpisode {
            episode_id: id.into(),
            outcome: Some(Outcome::from_failed(failed)),
            actors: vec![Actor::Agent; d_rep.len()],
            signals: d_rep
                .iter()
                .map(|&d| StepSignals {
                    u: Some(0.2),
                    d_rep: d,
                    ..StepSignals::default()
                })
                .collect(),
        }
    }

    fn toy() -> Vec<PreparedEpisode> {
        vec![
            episode("f1", true, &[0.1, 0.95, 0.2]),
            episode("f2", true, &[0.9, 0.1, 0.1, 0.1]),
            episode("s1", false, &[0.1, 0.2, 0.1]),
            episode("s2", false, &[0.3, 0.1]),
            episode("s3", false, &[0.05, 0.15, 0.1, 0.2]),
        ]
    }

    #[test]
    fn single_candidate_grid_returns_it() {
        let p = TracerParams::new(0.5, 2.0, 1.0, 0.3, 0.4).unwrap();
        let r = fit(&toy(), &GridSpec::single(p)).unwrap();
        assert_eq!(r.best, p);
        assert_eq!(r.surface.len(), 1);
    }

    #[test]
    fn fit_prefers_repetition_weight_and_is_deterministic() {
        let grid = GridSpec::default();
        let a = fit(&toy(), &grid).unwrap();
        let b = fit(&toy(), &grid).unwrap();
        assert_eq!(a.to_json_line(), b.to_json_line());
        assert!(a.best.alpha > 0.0);
        let min = a.surface.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.loss, min);
        assert_eq!(CalibrationReport::from_json(&a.to_json_line()).unwrap(), a);
    }

    #[test]
    fn duplicated_dataset_gives_same_best() {
        let grid = GridSpec::default();
        let once = fit(&toy(), &grid).unwrap();
        let twice: Vec<PreparedEpisode> = toy().into_iter().chain(toy()).collect();
        assert_eq!(fit(&twice, &grid).unwrap().best, once.best);
    }

    #[test]
    fn one_class_is_rejected() {
        let only_fail: Vec<PreparedEpisode> = toy().into_iter().filter(|e| e.episode_id.starts_with('f')).collect();
        assert!(matches!(fit(&only_fail, &GridSpec::default()), Err(CalibrationError::EmptyClass("successful"))));
        let mut unlabeled = toy();
        unlabeled[0].outcome = None;
        assert!(matches!(fit(&unlabeled, &GridSpec::default()), Err(CalibrationError::Unlabeled(_))));
    }

    #[test]
    fn grid_from_config() {
        let g = GridSpec::from_kv(&KvConfig::parse("grid_alpha = 0, 1\ntau = 0.5").unwrap()).unwrap();
        assert_eq!(g.alpha, vec![0.0, 1.0]);
        assert_eq!(g.tau, 0.5);
        assert!(GridSpec::from_kv(&KvConfig::parse("grid_k = 0, 0.5").unwrap()).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let (t, v) = split_indices(10, 0.3, 9);
        assert_eq!(v.len(), 3);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 9), (t, v));
    }

    proptest! {
        #[test]
        fn shifting_failures_up_does_not_raise_loss(
            f in prop::collection::vec(-5.0f64..5.0, 1..20),
            s in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in 0.0f64..3.0,
        ) {
            let base = pairwise_logistic_loss(&f, &s, 0.1).unwrap();
            let up: Vec<f64> = f.iter().map(|x| x + c).collect();
            prop_assert!(pairwise_logistic_loss(&up, &s, 0.1).unwrap() <= base + 1e-12);
        }

        #[test]
        fn scaling_weights_preserves_ranking(lam in 0.1f64..10.0) {
            let eps = toy();
            let labels: Vec<bool> = eps.iter().map(|e| e.is_failure().unwrap()).collect();
            let p = TracerParams::new(1.0, 1.0, 1.0, 0.3, 0.5).unwrap();
            // U is also scaled so the whole step risk scales by lam.
            let scaled: Vec<PreparedEpisode> = eps.iter().map(|e| PreparedEpisode {
                signals: e.signals.iter().map(|s| StepSignals { u: s.u.map(|u| u * lam), ..*s }).collect(),
                ..e.clone()
            }).collect();
            let q = TracerParams { alpha: lam, beta: lam, gamma: lam, ..p };
            let a = auroc(&score_all(&eps, &p), &labels).unwrap();
            let b = auroc(&score_all(&scaled, &q), &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
