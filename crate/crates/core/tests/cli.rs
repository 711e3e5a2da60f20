//! The `meminv` binary end to end: subcommands, output files, exit codes.

mod common;

use common::small_experiment;
use meminv::config::ExperimentConfig;
use meminv::experiment::{METRICS_FILE, SOURCE_FILE, SUMMARY_FILE, TARGET_TEST_FILE, TARGET_TRAIN_FILE};
use meminv::io::{load_dataset, METRICS_HEADER};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn meminv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meminv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `cfg` with its output directory under `dir` and returns the
/// config path.
fn write_config(dir: &Path, name: &str, mut cfg: ExperimentConfig) -> PathBuf {
    cfg.output_dir = dir.join(name);
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, cfg.dump().unwrap()).unwrap();
    path
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small(epochs: usize) -> ExperimentConfig {
    let mut cfg = small_experiment();
    cfg.train.epochs = epochs;
    cfg
}

#[test]
fn generate_writes_three_disjoint_deterministic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a", small(1));
    let b = write_config(tmp.path(), "b", small(1));
    for cfg in [&a, &b] {
        let out = meminv(&["generate", arg(cfg)]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("identities shared by source and target train: 0"));
    }
    for file in [SOURCE_FILE, TARGET_TRAIN_FILE, TARGET_TEST_FILE] {
        let x = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical configs");
    }
    let ids = |f: &str| -> HashSet<u32> {
        load_dataset(&tmp.path().join("a").join(f)).unwrap().identities().into_iter().collect()
    };
    assert!(ids(SOURCE_FILE).is_disjoint(&ids(TARGET_TRAIN_FILE)));
    assert!(ids(TARGET_TRAIN_FILE).is_disjoint(&ids(TARGET_TEST_FILE)));
}

#[test]
fn single_camera_with_camera_invariance_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.target.num_cameras = 1;
    let path = write_config(tmp.path(), "c1", cfg);
    let out = meminv(&["generate", arg(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("CI requires C ≥ 2"), "{}", stderr(&out));
}

#[test]
fn malformed_config_reports_line_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    let text = small(1).dump().unwrap().replace("[train]\n", "[train]\nlearning_rate = 3\n");
    std::fs::write(&path, text).unwrap();
    let out = meminv(&["train", arg(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line "), "{}", stderr(&out));
    assert_eq!(meminv(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "empty", small(1));
    let out = meminv(&["train", arg(&path)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains(SOURCE_FILE));
    assert_eq!(meminv(&["generate", "/nonexistent/config.toml"]).status.code(), Some(2));
}

#[test]
fn one_epoch_gives_one_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "one", small(1));
    assert!(meminv(&["generate", arg(&path)]).status.success());
    let out = meminv(&["train", arg(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(tmp.path().join("one").join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2, "{csv}");
    assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
    assert!(tmp.path().join("one").join(SUMMARY_FILE).exists());
}

#[test]
fn identical_runs_give_identical_metrics_at_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [("r1", None), ("r2", None), ("r3", Some("3"))];
    for (name, threads) in runs {
        let path = write_config(tmp.path(), name, small(12));
        assert!(meminv(&["generate", arg(&path)]).status.success());
        let mut args = vec![];
        if let Some(t) = threads {
            args.extend(["--threads", t]);
        }
        args.extend(["train", arg(&path)]);
        let out = meminv(&args);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |name: &str| std::fs::read(tmp.path().join(name).join(METRICS_FILE)).unwrap();
    assert_eq!(read("r1"), read("r2"));
    assert_eq!(read("r1"), read("r3"));
}

#[test]
fn resume_and_eval_use_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let full = write_config(tmp.path(), "full", small(10));
    assert!(meminv(&["generate", arg(&full)]).status.success());
    assert!(meminv(&["train", arg(&full)]).status.success());

    let resumed = write_config(tmp.path(), "resumed", small(10));
    assert!(meminv(&["generate", arg(&resumed)]).status.success());
    let ckpt = tmp.path().join("full/checkpoints/epoch_0005.json");
    let out = meminv(&["train", arg(&resumed), "--resume", arg(&ckpt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let read = |name: &str| std::fs::read(tmp.path().join(name).join(METRICS_FILE)).unwrap();
    assert_eq!(read("full"), read("resumed"));

    let out = meminv(&["eval", arg(&full), "--checkpoint", arg(&ckpt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mAP"));

    let garbage = tmp.path().join("garbage.json");
    std::fs::write(&garbage, "{").unwrap();
    assert_eq!(meminv(&["eval", arg(&full), "--checkpoint", arg(&garbage)]).status.code(), Some(2));
}

#[test]
fn grid_flag_writes_six_metric_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "grid", small(2));
    assert!(meminv(&["generate", arg(&path)]).status.success());
    let out = meminv(&["train", arg(&path), "--grid"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = tmp.path().join("grid/grid");
    let rows = ["source_only", "ei", "ei_ci", "ei_ni", "ei_ci_ni", "train_on_target"];
    for row in rows {
        let csv = std::fs::read_to_string(dir.join(format!("{row}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3, "{row}");
    }
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);

    // The `grid` subcommand is the same run.
    let before = std::fs::read(dir.join("ei_ci_ni.csv")).unwrap();
    assert!(meminv(&["grid", arg(&path)]).status.success());
    assert_eq!(std::fs::read(dir.join("ei_ci_ni.csv")).unwrap(), before);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let out = meminv(&["gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let listed = stdout(&out).lines().filter(|l| l.contains("max rel err")).count();
    assert!(listed >= 6, "{}", stdout(&out));

    let out = meminv(&["gradcheck", "--corrupt", "neighborhood_invariance"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("worst: neighborhood_invariance"), "{}", stderr(&out));
}

#[test]
fn config_dump_is_complete_and_parses() {
    let out = meminv(&["config", "dump"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::default());

    let out = meminv(&["--threads", "4", "config", "dump"]);
    assert!(stdout(&out).contains("threads = 4"));
}
