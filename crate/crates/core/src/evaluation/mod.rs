//! Ranking, selective-execution and early-warning metrics.
//!
//! Labels are `true` for failed episodes, which are the positive class.

pub mod baseline;

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need both failed and successful episodes (failures: {failures}, successes: {successes})")]
    OneClass { failures: usize, successes: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no episodes to evaluate")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let f = labels.iter().filter(|&&y| y).count();
    (f, labels.len() - f)
}

fn require_both_classes(labels: &[bool]) -> Result<(usize, usize), EvalError> {
    let (failures, successes) = class_counts(labels);
    if failures == 0 || successes == 0 {
        return Err(EvalError::OneClass { failures, successes });
    }
    Ok((failures, successes))
}

/// Indices ordered by descending score, grouped into blocks of equal score.
fn tie_blocks_desc(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Mann–Whitney statistic with midranks: the probability that a random
/// failure outscores a random success, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = require_both_classes(labels)?;
    // Ascending blocks; rank of a block is the mean of its 1-based positions.
    let mut blocks = tie_blocks_desc(scores);
    blocks.reverse();
    let mut rank_sum = 0.0;
    let mut seen = 0usize;
    for b in &blocks {
        let midrank = seen as f64 + (b.len() as f64 + 1.0) / 2.0;
        rank_sum += midrank * b.iter().filter(|&&i| labels[i]).count() as f64;
        seen += b.len();
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Failure is predicted for scores `>= threshold`.
    pub threshold: f64,
}

/// ROC points for every distinct score, from the strictest threshold
/// (`+inf`, nothing flagged) down to the lowest score (everything flagged).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, EvalError> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = require_both_classes(labels)?;
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for b in tie_blocks_desc(scores) {
        for &i in &b {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        out.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: scores[b[0]],
        });
    }
    Ok(out)
}

/// Permutation baseline: AUROC under `rounds` seeded label shuffles, as
/// (mean, standard deviation).
pub fn permutation_auroc(
    scores: &[f64],
    labels: &[bool],
    rounds: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    check_lengths(scores, labels)?;
    require_both_classes(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut values = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        shuffled.shuffle(&mut rng);
        values.push(auroc(scores, &shuffled)?);
    }
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

/// Accuracy-rejection curve and its normalized area.
///
/// Episodes are rejected most-uncertain first, tied scores as one block.
/// Each point is (rejected fraction, success rate among retained episodes);
/// points exist while at least one episode is retained. The area is the
/// trapezoid integral divided by the covered rejection span, so it is an
/// average accuracy in `[0, 1]`.
pub fn auarc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<(f64, f64)>), EvalError> {
    check_lengths(scores, labels)?;
    let n = scores.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let mut retained = n;
    let mut retained_ok = labels.iter().filter(|&&y| !y).count();
    let mut curve = vec![(0.0, retained_ok as f64 / retained as f64)];
    for b in tie_blocks_desc(scores) {
        retained -= b.len();
        retained_ok -= b.iter().filter(|&&i| !labels[i]).count();
        if retained == 0 {
            break;
        }
        curve.push(((n - retained) as f64 / n as f64, retained_ok as f64 / retained as f64));
    }
    if curve.len() == 1 {
        return Ok((curve[0].1, curve));
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let span = curve.last().unwrap().0 - curve[0].0;
    Ok((area / span, curve))
}

/// Number of progress checkpoints (5% steps).
pub const PROGRESS_STEPS: usize = 20;

/// First 1-based step whose prefix score reaches `threshold`.
pub fn detection_step(prefix_scores: &[f64], threshold: f64) -> Option<usize> {
    prefix_scores.iter().position(|&s| s >= threshold).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyWarning {
    pub threshold: f64,
    /// Per failed episode: normalized detection time, `None` if never crossed.
    pub detection_times: Vec<Option<f64>>,
    /// (progress, fraction of all failed episodes detected by then); empty
    /// when there are no failed episodes.
    pub curve: Vec<(f64, f64)>,
    pub mean_time: Option<f64>,
    pub median_time: Option<f64>,
    pub rate_at_20: f64,
    pub n_failed: usize,
    pub n_detected: usize,
}

/// Early-warning statistics over the prefix-score sequences of failed
/// episodes. Undetected episodes stay in the curve's denominator but are left
/// out of the mean and median.
pub fn early_warning(failed_prefixes: &[Vec<f64>], threshold: f64) -> EarlyWarning {
    let steps: Vec<Option<(usize, usize)>> = failed_prefixes
        .iter()
        .map(|p| detection_step(p, threshold).map(|t| (t, p.len())))
        .collect();
    let n_failed = steps.len();
    let detection_times: Vec<Option<f64>> = steps
        .iter()
        .map(|d| d.map(|(t, n)| t as f64 / n as f64))
        .collect();
    let curve: Vec<(f64, f64)> = if n_failed == 0 {
        Vec::new()
    } else {
        (1..=PROGRESS_STEPS)
            .map(|i| {
                // t/N <= i/20, compared in integers.
                let hit = steps
                    .iter()
                    .filter(|d| matches!(d, Some((t, n)) if t * PROGRESS_STEPS <= i * n))
                    .count();
                (i as f64 / PROGRESS_STEPS as f64, hit as f64 / n_failed as f64)
            })
            .collect()
    };
    let mut detected: Vec<f64> = detection_times.iter().flatten().copied().collect();
    detected.sort_by(f64::total_cmp);
    let n_detected = detected.len();
    let mean_time = (n_detected > 0).then(|| detected.iter().sum::<f64>() / n_detected as f64);
    let median_time = (n_detected > 0).then(|| {
        if n_detected % 2 == 1 {
            detected[n_detected / 2]
        } else {
            (detected[n_detected / 2 - 1] + detected[n_detected / 2]) / 2.0
        }
    });
    let rate_at_20 = curve.get(3).map_or(0.0, |p| p.1);
    EarlyWarning {
        threshold,
        detection_times,
        curve,
        mean_time,
        median_time,
        rate_at_20,
        n_failed,
        n_detected,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    pub auarc: f64,
    pub roc: Vec<RocPoint>,
    pub accuracy_rejection_curve: Vec<(f64, f64)>,
    pub early_warning: EarlyWarning,
    pub n_failures: usize,
    pub n_successes: usize,
    /// Prefix-level AUROC over all (episode, step) pairs, when prefixes exist.
    pub prefix_auroc: Option<f64>,
}

/// Full report. `prefixes` holds every episode's prefix scores aligned with
/// `scores`; pass an empty slice to skip the prefix-based parts.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    prefixes: &[Vec<f64>],
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    let auroc_value = auroc(scores, labels)?;
    let (auarc_value, arc) = auarc(scores, labels)?;
    let roc = roc_curve(scores, labels)?;
    let (n_failures, n_successes) = class_counts(labels);
    let (failed, prefix_auroc) = if prefixes.is_empty() {
        (Vec::new(), None)
    } else {
        if prefixes.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: prefixes.len(),
                labels: labels.len(),
            });
        }
        let failed: Vec<Vec<f64>> = prefixes
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y)
            .map(|(p, _)| p.clone())
            .collect();
        let (flat, flat_labels): (Vec<f64>, Vec<bool>) = prefixes
            .iter()
            .zip(labels)
            .flat_map(|(p, &y)| p.iter().map(move |&s| (s, y)))
            .unzip();
        (failed, Some(auroc(&flat, &flat_labels)?))
    };
    Ok(EvalReport {
        auroc: auroc_value,
        auarc: auarc_value,
        roc,
        accuracy_rejection_curve: arc,
        early_warning: early_warning(&failed, threshold),
        n_failures,
        n_successes,
        prefix_auroc,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Human-readable summary; the first line is `AUROC/AUARC: x.xxx / y.yyy`.
pub fn format_summary(r: &EvalReport) -> String {
    let ew = &r.early_warning;
    let mut s = format!("AUROC/AUARC: {:.3} / {:.3}\n", r.auroc, r.auarc);
    s += &format!(
        "episodes: {} (failures {}, successes {})\n",
        r.n_failures + r.n_successes,
        r.n_failures,
        r.n_successes
    );
    if let Some(p) = r.prefix_auroc {
        s += &format!("prefix AUROC: {p:.3}\n");
    }
    s += &format!("threshold: {}\n", ew.threshold);
    s += &format!(
        "early warning: detected {} of {} failed episodes ({} undetected)\n",
        ew.n_detected,
        ew.n_failed,
        ew.n_failed - ew.n_detected
    );
    s += &format!("detected by 20% progress: {:.3}\n", ew.rate_at_20);
    s += &format!(
        "normalized detection time mean/median: {} / {}\n",
        fmt_opt(ew.mean_time),
        fmt_opt(ew.median_time)
    );
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn curve_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (x, y) in points {
        s += &format!("{x},{y}\n");
    }
    s
}

/// Writes `summary.txt`, `roc.csv`, `arc.csv` and `early_warning.csv` into `dir`.
pub fn emit_report(r: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("summary.txt"), format_summary(r).as_bytes())?;
    let mut roc = String::from("fpr,tpr,threshold\n");
    for p in &r.roc {
        roc += &format!("{},{},{}\n", p.fpr, p.tpr, p.threshold);
    }
    write_file(&dir.join("roc.csv"), roc.as_bytes())?;
    write_file(
        &dir.join("arc.csv"),
        curve_csv("rejection,accuracy", &r.accuracy_rejection_curve).as_bytes(),
    )?;
    write_file(
        &dir.join("early_warning.csv"),
        curve_csv("progress,detection_rate", &r.early_warning.curve).as_bytes(),
    )?;
    Ok(())
}

/// Reads a two-column curve file written by [`emit_report`].
pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64)>, EvalError> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let bad = |message: String| EvalError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.deserialize::<(f64, f64)>() {
        out.push(rec.map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0usize;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi && !yj {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs as f64
    }

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4, 0.5, 0.1], &labels).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::OneClass { .. })));
        assert!(matches!(auroc(&[0.1], &[true, false]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn auarc_examples() {
        let (a, c) = auarc(&[0.3, 0.1, 0.2], &[false; 3]).unwrap();
        assert_eq!(a, 1.0);
        assert!(c.iter().all(|p| p.1 == 1.0));
        let (a, _) = auarc(&[0.3, 0.1, 0.2], &[true; 3]).unwrap();
        assert_eq!(a, 0.0);
        let (a, c) = auarc(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(c, vec![(0.0, 0.5), (0.5, 1.0)]);
        assert_eq!(a, 0.75);
        // Ties leave a single achievable point.
        let (a, c) = auarc(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!((a, c.len()), (0.5, 1));
    }

    #[test]
    fn early_warning_examples() {
        let p = vec![vec![0.1, 0.3, 0.7]];
        let ew = early_warning(&p, 0.5);
        assert_eq!(ew.detection_times, vec![Some(1.0)]);
        let ew = early_warning(&p, 0.2);
        assert!((ew.detection_times[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ew.curve[12].1, 0.0); // progress 0.65 < 2/3
        assert_eq!(ew.curve[13].1, 1.0); // progress 0.70
        let ew = early_warning(&p, 0.0);
        assert!((ew.detection_times[0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let ew = early_warning(&[vec![0.1, 0.2], vec![0.9, 0.9, 0.9, 0.9, 0.9]], 0.5);
        assert_eq!(ew.detection_times, vec![None, Some(0.2)]);
        assert_eq!((ew.n_detected, ew.mean_time, ew.rate_at_20), (1, Some(0.2), 0.5));
        let empty = early_warning(&[], 0.5);
        assert!(empty.curve.is_empty() && empty.mean_time.is_none());
    }

    #[test]
    fn detection_at_exact_progress_boundary() {
        // Step 4 of 20 is exactly 20% progress.
        let mut p = vec![0.0; 20];
        p[3] = 1.0;
        let ew = early_warning(&[p], 0.5);
        assert_eq!(ew.rate_at_20, 1.0);
        assert_eq!(ew.curve[2].1, 0.0);
    }

    #[test]
    fn roc_points() {
        let roc = roc_curve(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(roc.len(), 5);
        assert_eq!((roc[2].fpr, roc[2].tpr, roc[2].threshold), (0.0, 1.0, 0.8));
        assert_eq!((roc[4].fpr, roc[4].tpr), (1.0, 1.0));
    }

    #[test]
    fn summary_format_and_files() {
        let report = EvalReport {
            auroc: 0.735,
            auarc: 0.629,
            roc: vec![],
            accuracy_rejection_curve: vec![(0.0, 0.5), (0.5, 1.0)],
            early_warning: early_warning(&[], 0.5),
            n_failures: 1,
            n_successes: 1,
            prefix_auroc: None,
        };
        assert!(format_summary(&report).starts_with("AUROC/AUARC: 0.735 / 0.629\n"));
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let ew = fs::read_to_string(dir.path().join("early_warning.csv")).unwrap();
        assert_eq!(ew, "progress,detection_rate\n");
        assert_eq!(
            read_curve_csv(&dir.path().join("arc.csv")).unwrap(),
            report.accuracy_rejection_curve
        );
    }

    #[test]
    fn permutation_baseline_is_near_chance() {
        let scores: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        let (mean, sd) = permutation_auroc(&scores, &labels, 200, 3).unwrap();
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        assert!(sd > 0.0 && sd < 0.1);
    }

    fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 2.0]), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting((s, y) in dataset()) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            prop_assert_eq!(auroc(&s, &y).unwrap(), brute_auroc(&s, &y));
        }

        #[test]
        fn auroc_invariant_under_increasing_transform((s, y) in dataset()) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        }

        #[test]
        fn auarc_bounds((s, y) in dataset()) {
            let (a, c) = auarc(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(c.windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn lower_threshold_detects_no_later(p in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..20), 1..10), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            let e_hi = early_warning(&p, hi);
            let e_lo = early_warning(&p, lo);
            for (x, y) in e_hi.detection_times.iter().zip(&e_lo.detection_times) {
                if let Some(x) = x {
                    prop_assert!(y.unwrap() <= *x);
                }
            }
        }
    }
}
