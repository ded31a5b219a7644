use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn tracer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracer"))
        .current_dir(dir)
        .env_remove("TRACER_EMBED_URL")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// A small labeled dataset under `dir/data`.
fn small_dataset(dir: &Path) -> PathBuf {
    write(dir, "small.conf", "episodes = 120\n");
    ok(&tracer(dir, &["synth", "--config", "small.conf", "--seed", "3", "--output-dir", "data"]));
    dir.join("data/trajectories.jsonl")
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn synth_writes_reproducible_files() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ok(&tracer(d, &["synth", "--seed", "7", "--output-dir", "a"]));
    assert!(out.contains("episodes 1000"));
    ok(&tracer(d, &["synth", "--seed", "7", "--output-dir", "b"]));
    for f in ["trajectories.jsonl", "annotations.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_without_hazards_has_no_annotation_rows() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "zero.conf", "episodes = 50\nhazard_density = 0\n");
    ok(&tracer(d, &["synth", "--config", "zero.conf", "--output-dir", "z"]));
    assert_eq!(lines(&d.join("z/annotations.csv")), vec!["episode_id,step,hazard_kind,C_t"]);
}

#[test]
fn synth_default_scale_is_fast() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    ok(&tracer(tmp.path(), &["synth", "--output-dir", "t"]));
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn synth_rejects_bad_spec() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "bad.conf", "hazard_density = 1.5\n");
    let out = tracer(d, &["synth", "--config", "bad.conf", "--output-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_run_directory_names_the_seed() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "tiny.conf", "episodes = 5\n");
    ok(&tracer(d, &["synth", "--config", "tiny.conf", "--seed", "5"]));
    let runs: Vec<String> = fs::read_dir(d.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].starts_with("run-") && runs[0].ends_with("-seed5"), "{runs:?}");
}

#[test]
fn score_writes_one_row_per_episode() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    ok(&tracer(d, &["score", "--input", log.to_str().unwrap(), "--output-dir", "s"]));
    let rows = lines(&d.join("s/scores.csv"));
    assert_eq!(rows[0], "episode_id,score,score_agent,score_user,n_steps,argmax_step");
    assert_eq!(rows.len(), 121);
    assert!(!d.join("s/prefix_scores.csv").exists());
    assert!(!d.join("s/signals").exists());
}

#[test]
fn score_prefix_and_signal_dump() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    write(d, "dump.conf", "dump_signals = true\n");
    ok(&tracer(
        d,
        &["score", "--input", log.to_str().unwrap(), "--prefix", "--config", "dump.conf", "--output-dir", "s"],
    ));
    let prefix = lines(&d.join("s/prefix_scores.csv"));
    assert_eq!(prefix[0], "episode_id,step,score");
    let total_steps: usize = lines(&d.join("s/scores.csv"))[1..]
        .iter()
        .map(|r| r.split(',').nth(4).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(prefix.len() - 1, total_steps);
    assert_eq!(fs::read_dir(d.join("s/signals")).unwrap().count(), 120);
}

#[test]
fn score_missing_input_names_path() {
    let tmp = TempDir::new().unwrap();
    let out = tracer(tmp.path(), &["score", "--input", "missing.jsonl", "--output-dir", "s"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn score_malformed_log_is_input_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "bad.jsonl", "{not json\n");
    let out = tracer(d, &["score", "--input", "bad.jsonl", "--output-dir", "s"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn fit_reports_validation_auroc_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let log = log.to_str().unwrap();
    let out = ok(&tracer(d, &["fit", "--input", log, "--output-dir", "f1"]));
    assert!(out.contains("validation AUROC: "), "{out}");
    ok(&tracer(d, &["fit", "--input", log, "--output-dir", "f2"]));
    let a = fs::read(d.join("f1/calibration.json")).unwrap();
    assert_eq!(a, fs::read(d.join("f2/calibration.json")).unwrap());
}

#[test]
fn fit_single_candidate_grid_echoes_it() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    write(d, "grid.conf", "grid_alpha = 2\ngrid_beta = 0.5\ngrid_gamma = 1\ngrid_k = 0.3\ngrid_w = 0.4\npilot_w = 0.4\n");
    let out = ok(&tracer(d, &["fit", "--input", log.to_str().unwrap(), "--grid", "grid.conf", "--output-dir", "f"]));
    assert!(out.contains("best alpha=2 beta=0.5 gamma=1 k=0.3 w=0.4"), "{out}");
}

#[test]
fn fit_one_class_exits_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "none.conf", "episodes = 30\nhazard_density = 0\n");
    ok(&tracer(d, &["synth", "--config", "none.conf", "--output-dir", "data"]));
    let out = tracer(d, &["fit", "--input", "data/trajectories.jsonl", "--output-dir", "f"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_perfect_separation_and_permutation_baseline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut scores = String::from("episode_id,score,score_agent,score_user,n_steps,argmax_step\n");
    let mut labels = String::from("episode_id,outcome\n");
    for i in 0..200 {
        let failed = i % 2 == 0;
        let s = if failed { 2.0 + i as f64 / 1000.0 } else { i as f64 / 1000.0 };
        scores += &format!("e{i},{s},{s},0,10,1\n");
        labels += &format!("e{i},{}\n", u8::from(failed));
    }
    write(d, "scores.csv", &scores);
    write(d, "labels.csv", &labels);
    write(d, "eval.conf", "labels = labels.csv\npermutation_rounds = 500\n");
    let out = ok(&tracer(d, &["eval", "--input", "scores.csv", "--config", "eval.conf", "--output-dir", "e"]));
    let summary = fs::read_to_string(d.join("e/summary.txt")).unwrap();
    assert!(summary.starts_with("AUROC/AUARC: 1.000 / "), "{summary}");
    let perm = fs::read_to_string(d.join("e/permutation.txt")).unwrap();
    let mean: f64 = perm.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((mean - 0.5).abs() < 0.02, "{perm}");
    assert!(out.contains("shuffled-label AUROC"));
    for f in ["roc.csv", "arc.csv", "early_warning.csv"] {
        assert!(d.join("e").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_without_labels_exits_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "scores.csv", "episode_id,score,score_agent,score_user,n_steps,argmax_step\ne1,1,1,0,3,1\n");
    let out = tracer(d, &["eval", "--input", "scores.csv", "--output-dir", "e"]);
    assert_eq!(out.status.code(), Some(3));

    // An unlabeled trajectory log is the same failure class.
    let log = r#"{"episode_id":"e1","outcome":null,"steps":[{"actor":"user","text":"hi","observation_text":null,"is_tool_call":false,"token_logprobs":null}]}"#;
    write(d, "unlabeled.jsonl", &format!("{log}\n"));
    let out = tracer(d, &["eval", "--input", "unlabeled.jsonl", "--output-dir", "e2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn score_then_eval_matches_eval_on_log() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let log = log.to_str().unwrap();
    write(d, "theta.conf", "alpha = 2\nbeta = 1\ngamma = 0.5\nk = 0.2\nw = 0.25\n");
    ok(&tracer(d, &["score", "--input", log, "--params", "theta.conf", "--prefix", "--output-dir", "s"]));
    ok(&tracer(d, &["eval", "--input", log, "--params", "theta.conf", "--output-dir", "direct"]));
    write(d, "eval.conf", &format!("labels = {log}\nprefix_scores = s/prefix_scores.csv\n"));
    ok(&tracer(d, &["eval", "--input", "s/scores.csv", "--config", "eval.conf", "--output-dir", "composed"]));
    for f in ["summary.txt", "roc.csv", "arc.csv", "early_warning.csv", "permutation.txt"] {
        assert_eq!(
            fs::read(d.join("direct").join(f)).unwrap(),
            fs::read(d.join("composed").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(d.join("direct/baseline_summary.txt").exists());
}

#[test]
fn fitted_report_feeds_score() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let log = log.to_str().unwrap();
    ok(&tracer(d, &["fit", "--input", log, "--output-dir", "f"]));
    let out = ok(&tracer(d, &["score", "--input", log, "--params", "f/calibration.json", "--output-dir", "s"]));
    assert!(out.starts_with("scored 120 episodes"));
}

#[test]
fn unreachable_provider_exits_4() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = Command::new(env!("CARGO_BIN_EXE_tracer"))
        .current_dir(d)
        .env("TRACER_EMBED_URL", format!("http://127.0.0.1:{port}/embed"))
        .args(["score", "--input", log.to_str().unwrap(), "--provider", "external", "--output-dir", "s"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn external_provider_without_endpoint_is_config_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let out = tracer(d, &["score", "--input", log.to_str().unwrap(), "--provider", "external", "--output-dir", "s"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_provider_and_bad_threshold_are_input_errors() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let log = small_dataset(d);
    let log = log.to_str().unwrap();
    let out = tracer(d, &["score", "--input", log, "--provider", "remote", "--output-dir", "s"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tracer(d, &["eval", "--input", log, "--threshold", "abc", "--output-dir", "e"]);
    assert_eq!(out.status.code(), Some(2));
}
