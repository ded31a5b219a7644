//! Subcommand implementations. Each writes its files under one run directory
//! and returns a short report for standard output.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use tracer_core::calibration::{fit_with_validation, select_threshold, split_indices, CalibrationReport, GridSpec};
use tracer_core::config::KvConfig;
use tracer_core::embeddings::{Embedder, EmbeddingProviderConfig, ProviderKind};
use tracer_core::evaluation::{baseline, emit_report, evaluate, format_summary, permutation_auroc};
use tracer_core::scoring::{
    prepare_episodes, read_prefix_csv, read_scores_csv, write_prefix_csv, write_scores_csv,
};
use tracer_core::signals::write_signal_csv;
use tracer_core::synth::{generate, write_annotations_csv, ScenarioSpec};
use tracer_core::trajectory::{parse_trajectory_log, write_trajectory_log};
use tracer_core::{PrefixK, PreparedEpisode, SignalConfig, TracerParams, TrajectoryRecord};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.3;
pub const DEFAULT_PERMUTATION_ROUNDS: usize = 200;
pub const EMBED_URL_ENV: &str = "TRACER_EMBED_URL";

#[derive(Debug, Clone, PartialEq)]
pub enum Subcommand {
    Score { params: Option<PathBuf>, prefix: bool },
    Fit { grid: Option<PathBuf> },
    Eval { params: Option<PathBuf>, threshold: Option<f64> },
    Synth,
}

/// Everything a subcommand needs, resolved from flags, the config file and
/// the environment.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Subcommand,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub settings: KvConfig,
    pub seed: u64,
    pub provider: EmbeddingProviderConfig,
}

pub struct Flags {
    pub command: Subcommand,
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub provider: Option<String>,
    pub embed_url: Option<String>,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{what} not found: {}", path.display())))
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    require_file(path, what)?;
    fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(flags: Flags) -> Result<Self, CliError> {
        let settings = match &flags.config {
            Some(p) => KvConfig::parse(&read_text(p, "config file")?)?,
            None => KvConfig::default(),
        };
        let seed = match flags.seed {
            Some(s) => s,
            None => settings.parsed_or("seed", DEFAULT_SEED)?,
        };
        let mut provider = EmbeddingProviderConfig::from_kv(&settings)?;
        if let Some(kind) = &flags.provider {
            provider.kind = kind.parse::<ProviderKind>().map_err(CliError::input)?;
        }
        if let Some(url) = flags.embed_url.filter(|u| !u.is_empty()) {
            provider.endpoint = Some(url);
        }
        let needs_input = flags.command != Subcommand::Synth;
        let input = match flags.input {
            Some(p) => {
                require_file(&p, "input file")?;
                Some(p)
            }
            None if needs_input => return Err(CliError::input("--input is required")),
            None => None,
        };
        for (path, what) in match &flags.command {
            Subcommand::Score { params, .. } | Subcommand::Eval { params, .. } => vec![(params, "params file")],
            Subcommand::Fit { grid } => vec![(grid, "grid file")],
            Subcommand::Synth => vec![],
        } {
            if let Some(p) = path {
                require_file(p, what)?;
            }
        }
        let output_dir = flags.output_dir.unwrap_or_else(|| {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("run-{secs}-seed{seed}"))
        });
        Ok(Self {
            command: flags.command,
            input,
            output_dir,
            settings,
            seed,
            provider,
        })
    }

    pub fn execute(&self) -> Result<String, CliError> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", self.output_dir.display())))?;
        match &self.command {
            Subcommand::Score { params, prefix } => self.score(params.as_deref(), *prefix),
            Subcommand::Fit { grid } => self.fit(grid.as_deref()),
            Subcommand::Eval { params, threshold } => self.eval(params.as_deref(), *threshold),
            Subcommand::Synth => self.synth(),
        }
    }

    fn input(&self) -> &Path {
        self.input.as_deref().expect("input checked during resolve")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn read_log(&self, path: &Path) -> Result<Vec<TrajectoryRecord>, CliError> {
        let text = read_text(path, "trajectory log")?;
        parse_trajectory_log(text.as_bytes()).map_err(|e| {
            let mut err = CliError::from(e);
            err.message = format!("{}: {}", path.display(), err.message);
            err
        })
    }

    fn prepare(&self, trajs: &[TrajectoryRecord]) -> Result<Vec<PreparedEpisode>, CliError> {
        let signal_cfg = SignalConfig::from_kv(&self.settings)?;
        let embedder: Arc<dyn Embedder> = self.provider.build()?;
        Ok(prepare_episodes(trajs, &signal_cfg, embedder.as_ref())?)
    }

    /// `--params` accepts a calibration report (JSON) or a `key = value` file;
    /// without it the config file's `alpha`…`w` keys, or the defaults, apply.
    fn params(&self, path: Option<&Path>) -> Result<TracerParams, CliError> {
        let Some(path) = path else {
            return Ok(TracerParams::from_kv(&self.settings)?);
        };
        let text = read_text(path, "params file")?;
        if text.trim_start().starts_with('{') {
            let report = CalibrationReport::from_json(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            report.best.validate()?;
            Ok(report.best)
        } else {
            Ok(TracerParams::from_kv(&KvConfig::parse(&text)?)?)
        }
    }

    fn prefix_mode(&self) -> Result<PrefixK, CliError> {
        match self.settings.get("prefix_k").unwrap_or("per_prefix") {
            "per_prefix" => Ok(PrefixK::PerPrefix),
            "frozen" => Ok(PrefixK::Frozen),
            other => Err(CliError::input(format!(
                "config key `prefix_k`: expected per_prefix or frozen, got {other:?}"
            ))),
        }
    }

    fn score(&self, params: Option<&Path>, prefix: bool) -> Result<String, CliError> {
        let p = self.params(params)?;
        let trajs = self.read_log(self.input())?;
        let eps = self.prepare(&trajs)?;
        let scores: Vec<_> = eps.iter().map(|e| e.score(&p)).collect();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &scores).map_err(|e| CliError::input(e.to_string()))?;
        write_out(&self.out("scores.csv"), &buf)?;
        write_out(&self.out("params.txt"), p.to_kv().render().as_bytes())?;
        if prefix {
            let mode = self.prefix_mode()?;
            let rows: Vec<(String, Vec<f64>)> =
                eps.iter().map(|e| (e.episode_id.clone(), e.prefix_scores(&p, mode))).collect();
            let mut buf = Vec::new();
            write_prefix_csv(&mut buf, &rows).map_err(|e| CliError::input(e.to_string()))?;
            write_out(&self.out("prefix_scores.csv"), &buf)?;
        }
        if self.settings.bool_or("dump_signals", false)? {
            let dir = self.out("signals");
            fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
            for e in &eps {
                let mut buf = Vec::new();
                write_signal_csv(&mut buf, &e.actors, &e.signals).map_err(|e| CliError::input(e.to_string()))?;
                write_out(&dir.join(format!("{}.csv", file_stem(&e.episode_id))), &buf)?;
            }
        }
        Ok(format!(
            "scored {} episodes with alpha={} beta={} gamma={} k={} w={}\nwrote {}",
            scores.len(),
            p.alpha,
            p.beta,
            p.gamma,
            p.k,
            p.w,
            self.output_dir.display()
        ))
    }

    fn fit(&self, grid: Option<&Path>) -> Result<String, CliError> {
        let grid = match grid {
            Some(path) => GridSpec::from_kv(&KvConfig::parse(&read_text(path, "grid file")?)?)?,
            None => GridSpec::from_kv(&self.settings)?,
        };
        let fraction: f64 = self.settings.parsed_or("validation_fraction", DEFAULT_VALIDATION_FRACTION)?;
        if !(0.0..1.0).contains(&fraction) {
            return Err(CliError::input(format!("validation_fraction must lie in [0, 1), got {fraction}")));
        }
        let trajs = self.read_log(self.input())?;
        let eps = self.prepare(&trajs)?;
        let (train_idx, val_idx) = split_indices(eps.len(), fraction, self.seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| eps[i].clone()).collect::<Vec<_>>();
        let report = fit_with_validation(&pick(&train_idx), &pick(&val_idx), &grid)?;
        write_out(&self.out("calibration.json"), format!("{}\n", report.to_json_line()).as_bytes())?;
        let b = report.best;
        let validation = report
            .validation_auroc
            .map_or_else(|| "n/a".to_string(), |a| format!("{a:.3}"));
        Ok(format!(
            "best alpha={} beta={} gamma={} k={} w={}\nloss: {}\nvalidation AUROC: {validation} ({} train / {} validation episodes)\nwrote {}",
            b.alpha,
            b.beta,
            b.gamma,
            b.k,
            b.w,
            report.loss,
            report.n_train,
            report.n_validation,
            self.out("calibration.json").display()
        ))
    }

    fn eval(&self, params: Option<&Path>, threshold: Option<f64>) -> Result<String, CliError> {
        let input = self.input();
        let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let (ids, scores, labels, prefixes, baseline_scores) = if is_csv {
            self.eval_inputs_from_csv(input)?
        } else {
            self.eval_inputs_from_log(input, params)?
        };
        let threshold = match threshold {
            Some(t) if t.is_finite() => t,
            Some(t) => return Err(CliError::input(format!("--threshold must be finite, got {t}"))),
            None => select_threshold(&scores, &labels)?,
        };
        let report = evaluate(&scores, &labels, &prefixes, threshold)?;
        emit_report(&report, &self.output_dir)?;

        let rounds: usize = self.settings.parsed_or("permutation_rounds", DEFAULT_PERMUTATION_ROUNDS)?;
        let mut out = format_summary(&report);
        if rounds > 0 {
            let (mean, sd) = permutation_auroc(&scores, &labels, rounds, self.seed)?;
            let line = format!("shuffled-label AUROC: {mean:.3} +/- {sd:.3} over {rounds} permutations\n");
            write_out(&self.out("permutation.txt"), line.as_bytes())?;
            out += &line;
        }
        if let Some((base, base_prefixes)) = baseline_scores {
            let thr = select_threshold(&base, &labels)?;
            let b = evaluate(&base, &labels, &base_prefixes, thr)?;
            let text = format_summary(&b);
            write_out(&self.out("baseline_summary.txt"), text.as_bytes())?;
            out += &format!("entropy baseline {}", text.lines().next().unwrap_or_default());
            out.push('\n');
        }
        out += &format!("evaluated {} episodes; wrote {}", ids.len(), self.output_dir.display());
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn eval_inputs_from_log(
        &self,
        input: &Path,
        params: Option<&Path>,
    ) -> Result<(Vec<String>, Vec<f64>, Vec<bool>, Vec<Vec<f64>>, Option<(Vec<f64>, Vec<Vec<f64>>)>), CliError> {
        let p = self.params(params)?;
        let mode = self.prefix_mode()?;
        let trajs = self.read_log(input)?;
        let labels = trajs
            .iter()
            .map(|t| {
                t.outcome
                    .map(|o| o.is_failure())
                    .ok_or_else(|| CliError::data(format!("episode {} has no outcome label", t.episode_id)))
            })
            .collect::<Result<Vec<bool>, _>>()?;
        let eps = self.prepare(&trajs)?;
        let scores = eps.iter().map(|e| e.tracer(&p)).collect();
        let prefixes = eps.iter().map(|e| e.prefix_scores(&p, mode)).collect();
        let base = trajs.iter().map(baseline::normalized_entropy).collect();
        let base_prefixes = trajs.iter().map(baseline::normalized_entropy_prefixes).collect();
        let ids = trajs.into_iter().map(|t| t.episode_id).collect();
        Ok((ids, scores, labels, prefixes, Some((base, base_prefixes))))
    }

    /// Scores from a `score` run; labels come from the config key `labels`
    /// (a trajectory log or an `episode_id,outcome` CSV) and prefix scores
    /// from the optional key `prefix_scores`.
    #[allow(clippy::type_complexity)]
    fn eval_inputs_from_csv(
        &self,
        input: &Path,
    ) -> Result<(Vec<String>, Vec<f64>, Vec<bool>, Vec<Vec<f64>>, Option<(Vec<f64>, Vec<Vec<f64>>)>), CliError> {
        let text = read_text(input, "scores file")?;
        let rows = read_scores_csv(text.as_bytes()).map_err(|e| CliError::input(format!("{}: {e}", input.display())))?;
        let labels_path = self
            .settings
            .get("labels")
            .ok_or_else(|| CliError::data("no labels: set `labels = <log or csv>` in the config file"))?;
        let by_id = self.read_labels(Path::new(labels_path))?;
        let labels = rows
            .iter()
            .map(|r| {
                by_id
                    .get(&r.episode_id)
                    .copied()
                    .ok_or_else(|| CliError::data(format!("no label for episode {}", r.episode_id)))
            })
            .collect::<Result<Vec<bool>, _>>()?;
        let prefixes = match self.settings.get("prefix_scores") {
            None => Vec::new(),
            Some(path) => {
                let path = Path::new(path);
                let text = read_text(path, "prefix scores file")?;
                let mut map: HashMap<String, Vec<f64>> = read_prefix_csv(text.as_bytes())
                    .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
                    .into_iter()
                    .collect();
                rows.iter()
                    .map(|r| {
                        map.remove(&r.episode_id)
                            .ok_or_else(|| CliError::data(format!("no prefix scores for episode {}", r.episode_id)))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let scores = rows.iter().map(|r| r.score).collect();
        let ids = rows.into_iter().map(|r| r.episode_id).collect();
        Ok((ids, scores, labels, prefixes, None))
    }

    fn read_labels(&self, path: &Path) -> Result<HashMap<String, bool>, CliError> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let text = read_text(path, "labels file")?;
            let mut out = HashMap::new();
            for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<(String, u8)>() {
                let (id, outcome) = row.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
                if outcome > 1 {
                    return Err(CliError::data(format!("episode {id}: outcome must be 0 or 1, got {outcome}")));
                }
                out.insert(id, outcome == 1);
            }
            Ok(out)
        } else {
            self.read_log(path)?
                .into_iter()
                .map(|t| match t.outcome {
                    Some(o) => Ok((t.episode_id, o.is_failure())),
                    None => Err(CliError::data(format!("episode {} has no outcome label", t.episode_id))),
                })
                .collect()
        }
    }

    fn synth(&self) -> Result<String, CliError> {
        let mut settings = self.settings.clone();
        settings.set("seed", self.seed.to_string());
        let spec = ScenarioSpec::from_kv(&settings)?;
        let data = generate(&spec)?;
        let mut log = Vec::new();
        write_trajectory_log(&mut log, &data.trajectories).map_err(|e| CliError::input(e.to_string()))?;
        write_out(&self.out("trajectories.jsonl"), &log)?;
        let mut ann = Vec::new();
        write_annotations_csv(&mut ann, &data.annotations).map_err(|e| CliError::input(e.to_string()))?;
        write_out(&self.out("annotations.csv"), &ann)?;
        Ok(format!("{}\nwrote {}", data.stats(), self.output_dir.display()))
    }
}

/// Episode ids become file names; anything outside `[A-Za-z0-9._-]` is
/// replaced.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}
