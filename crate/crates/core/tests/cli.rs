//! Command round trips through the on-disk formats.

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use normal_vo::cli::formats::{read_trajectory, Dataset, TrajectoryRecord, CONFIG_FILE, GROUND_TRUTH_FILE};
use normal_vo::cli::{cmd_evaluate, cmd_experiment, cmd_run, cmd_simulate, CliError, RunConfig, RunOptions, BASELINE_METHOD, NORMAL_METHOD};
use normal_vo::estimator::EstimatorError;
use normal_vo::evaluation::AlignmentMode;
use normal_vo::simulator::{simulate, SceneConfig};
use tempfile::tempdir;

fn small() -> RunConfig {
    RunConfig {
        trajectory: "straight".into(),
        frame_count: 80,
        landmark_count: 1500,
        seeds: vec![5],
        ..RunConfig::default()
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn simulate_is_byte_identical_and_reloads() {
    let tmp = tempdir().unwrap();
    let cfg = small();
    let written = cmd_simulate(&cfg, &tmp.path().join("a"), false).unwrap();
    cmd_simulate(&cfg, &tmp.path().join("b"), false).unwrap();
    let a = read_dir_sorted(&tmp.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, read_dir_sorted(&tmp.path().join("b")));

    let loaded = Dataset::load(&tmp.path().join("a")).unwrap();
    assert_eq!(loaded, written);
    let seq = simulate(&cfg.scene_config().unwrap()).unwrap();
    assert_eq!(loaded.to_stream(1.0), seq.to_stream(1.0));
    assert_eq!(RunConfig::load(&tmp.path().join("a").join(CONFIG_FILE)).unwrap(), cfg);
}

#[test]
fn outlier_free_config_writes_no_outlier_flags() {
    let tmp = tempdir().unwrap();
    let cfg = RunConfig { outlier_rate: 0.0, ..small() };
    cmd_simulate(&cfg, tmp.path(), false).unwrap();
    let obs = fs::read_to_string(tmp.path().join("obs.csv")).unwrap();
    assert!(obs.lines().skip(1).all(|l| l.ends_with(",0")));
    assert!(obs.lines().count() > 1000);
}

#[test]
fn output_directory_policy() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("nested").join("out");
    cmd_simulate(&small(), &dir, false).unwrap();
    let err = cmd_simulate(&small(), &dir, false).unwrap_err();
    assert!(matches!(err, CliError::OutputExists(_)));
    assert_eq!(err.exit_code(), 1);
    cmd_simulate(&small(), &dir, true).unwrap();
}

#[test]
fn run_is_reproducible_and_flags_take_effect() {
    let tmp = tempdir().unwrap();
    let ds = tmp.path().join("ds");
    cmd_simulate(&small(), &ds, false).unwrap();
    let a = cmd_run(&ds, &tmp.path().join("a.txt"), None, &RunOptions::default()).unwrap();
    cmd_run(&ds, &tmp.path().join("b.txt"), None, &RunOptions::default()).unwrap();
    assert_eq!(fs::read(tmp.path().join("a.txt")).unwrap(), fs::read(tmp.path().join("b.txt")).unwrap());
    assert_eq!(read_trajectory(&tmp.path().join("a.txt")).unwrap(), a.records);
    assert_eq!(a.records.len(), 80);
    assert!(a.stats.normal_factors > 0);

    let off = RunOptions { no_normal: true, ..RunOptions::default() };
    let b = cmd_run(&ds, &tmp.path().join("c.txt"), None, &off).unwrap();
    assert_eq!(b.stats.normal_factors, 0);
    assert_eq!(b.stats.normal_cost, 0.0);

    let zero = RunOptions { lambda: Some(0.0), ..RunOptions::default() };
    let c = cmd_run(&ds, &tmp.path().join("d.txt"), None, &zero).unwrap();
    assert_eq!(c.records, b.records);
}

#[test]
fn noiseless_dataset_reproduces_ground_truth() {
    let tmp = tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let cfg = RunConfig { pixel_noise: 0.0, outlier_rate: 0.0, roughness: 0.0, normal_noise_deg: 0.0, ..small() };
    cmd_simulate(&cfg, &ds, false).unwrap();
    let est = tmp.path().join("est.txt");
    cmd_run(&ds, &est, None, &RunOptions::default()).unwrap();
    let eval = cmd_evaluate(&est, &ds.join(GROUND_TRUTH_FILE), 20, AlignmentMode::Full, &tmp.path().join("eval")).unwrap();
    assert!(eval.ate.rmse < 1e-6, "{}", eval.ate.rmse);
}

#[test]
fn evaluate_identical_files_reports_zero() {
    let tmp = tempdir().unwrap();
    let ds = tmp.path().join("ds");
    cmd_simulate(&small(), &ds, false).unwrap();
    let gt = ds.join(GROUND_TRUTH_FILE);
    let out = tmp.path().join("eval");
    let eval = cmd_evaluate(&gt, &gt, 20, AlignmentMode::Full, &out).unwrap();
    assert!(eval.ate.errors.iter().all(|e| *e < 1e-12));
    assert!(eval.rde.errors.iter().all(|e| *e == 0.0));
    let ate = fs::read_to_string(out.join("ate.csv")).unwrap();
    let rde = fs::read_to_string(out.join("rde.csv")).unwrap();
    assert_eq!(ate.lines().count() - 1, 80);
    assert_eq!(rde.lines().count() - 1, 80 - 20);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("Total"));

    let err = cmd_evaluate(&gt, &gt, 100, AlignmentMode::Full, &out).unwrap_err();
    assert!(matches!(err, CliError::Evaluation(_)));
}

#[test]
fn malformed_files_name_the_line() {
    let tmp = tempdir().unwrap();
    let ds = tmp.path().join("ds");
    cmd_simulate(&small(), &ds, false).unwrap();
    let obs = ds.join("obs.csv");
    let mut text = fs::read_to_string(&obs).unwrap();
    text = text.replacen("\n0,", "\n0,,", 1);
    fs::write(&obs, text).unwrap();
    let err = cmd_run(&ds, &tmp.path().join("x.txt"), None, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Parse { line: 2, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tracking_loss_reports_the_frame() {
    let tmp = tempdir().unwrap();
    let ds = tmp.path().join("ds");
    cmd_simulate(&small(), &ds, false).unwrap();
    let obs = ds.join("obs.csv");
    let text = fs::read_to_string(&obs).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("40,")).collect();
    fs::write(&obs, kept.join("\n")).unwrap();
    let err = cmd_run(&ds, &tmp.path().join("x.txt"), None, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Estimator(EstimatorError::TrackingLost { frame_id: 40, .. })), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn single_seed_experiment_matches_its_evaluation() {
    let tmp = tempdir().unwrap();
    let summary = cmd_experiment(&small(), tmp.path(), false).unwrap();
    assert_eq!(summary.seeds.len(), 1);
    let seed = &summary.seeds[0];
    let dir = tmp.path().join("seed_5");
    for method in [NORMAL_METHOD, BASELINE_METHOD] {
        let est = dir.join(format!("est_{method}.txt"));
        let gt = dir.join("dataset").join(GROUND_TRUTH_FILE);
        let eval = cmd_evaluate(&est, &gt, 20, AlignmentMode::Full, &tmp.path().join("check")).unwrap();
        assert_eq!(&eval, seed.evaluation(method).unwrap());
        assert_eq!(summary.median_ate_rmse(method), Some(eval.ate.rmse));
    }
    let report = fs::read_to_string(tmp.path().join("summary.txt")).unwrap();
    assert!(report.contains("completed seeds: 1 of 1"));
    assert_eq!(fs::read_to_string(tmp.path().join("per_seed.csv")).unwrap().lines().count(), 3);
}

#[test]
fn failed_seed_is_flagged_and_others_continue() {
    let tmp = tempdir().unwrap();
    let cfg = RunConfig { seeds: vec![5, 6], min_tracking_observations: 100_000, ..small() };
    let summary = cmd_experiment(&cfg, tmp.path(), false).unwrap();
    assert_eq!(summary.completed().count(), 0);
    assert!(summary.seeds.iter().all(|s| s.modes.iter().all(|m| m.result.is_err())));
    let report = summary.report();
    assert!(report.contains("FAILED seed 5 normal"));
    assert!(report.contains("completed seeds: 0 of 2"));
    assert!(summary.csv().contains("failed: tracking lost at frame 1"));
}

#[test]
fn aggregates_skip_failed_seeds() {
    let tmp = tempdir().unwrap();
    let cfg = RunConfig { seeds: vec![5, 6], ..small() };
    let mut summary = cmd_experiment(&cfg, tmp.path(), false).unwrap();
    let kept = summary.seeds[0].clone();
    summary.seeds[1].modes[1].result = Err("tracking lost at frame 12: 3 observations of mapped landmarks, need 6".into());
    assert_eq!(summary.completed().count(), 1);
    for method in [NORMAL_METHOD, BASELINE_METHOD] {
        assert_eq!(summary.median_ate_rmse(method), Some(kept.evaluation(method).unwrap().ate.rmse));
    }
    assert!(summary.report().contains("FAILED seed 6 baseline: tracking lost at frame 12"));
    assert!(summary.csv().lines().any(|l| l.starts_with("6,baseline,0,\"failed")));
}

#[test]
fn config_used_reproduces_the_dataset() {
    let tmp = tempdir().unwrap();
    let cfg = RunConfig { seed: 77, roughness: 0.02, ..small() };
    cmd_simulate(&cfg, &tmp.path().join("a"), false).unwrap();
    let again = RunConfig::load(&tmp.path().join("a").join(CONFIG_FILE)).unwrap();
    cmd_simulate(&again, &tmp.path().join("b"), false).unwrap();
    assert_eq!(read_dir_sorted(&tmp.path().join("a")), read_dir_sorted(&tmp.path().join("b")));
}

#[test]
fn trajectory_records_match_simulated_poses() {
    let seq = simulate(&SceneConfig { frame_count: 30, ..small().scene_config().unwrap() }).unwrap();
    let ds = Dataset::from_sequence(&seq);
    for (r, (f, gt)) in ds.ground_truth.iter().zip(seq.frames.iter().zip(&seq.ground_truth)) {
        assert_eq!(r.timestamp, f.timestamp);
        assert!(r.pose().max_abs_diff(&gt.inverse()) < 1e-15);
        assert_eq!(*r, TrajectoryRecord::from_pose(f.timestamp, &gt.inverse()));
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_normal-vo");
    let tmp = tempdir().unwrap();
    let status = |args: &[&str]| Command::new(bin)
            .args(args)
            .env("RUST_LOG", "off")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status().unwrap().code();
    assert_eq!(status(&["frobnicate"]), Some(1));
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "trajectory = \"straight\"\nframe_count = 60\nlandmark_count = 1500\n").unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(status(&["simulate", "--config", cfg.to_str().unwrap(), ds.to_str().unwrap()]), Some(0));
    assert_eq!(status(&["simulate", "--config", cfg.to_str().unwrap(), ds.to_str().unwrap()]), Some(1));
    let est = tmp.path().join("est.txt");
    assert_eq!(status(&["run", ds.to_str().unwrap(), est.to_str().unwrap(), "--no-normal"]), Some(0));
    let eval = tmp.path().join("eval");
    let gt = ds.join(GROUND_TRUTH_FILE);
    assert_eq!(status(&["evaluate", est.to_str().unwrap(), gt.to_str().unwrap(), eval.to_str().unwrap()]), Some(0));
    let missing = tmp.path().join("missing");
    assert_eq!(status(&["run", missing.to_str().unwrap(), est.to_str().unwrap()]), Some(2));
    fs::write(&cfg, "lamda = 3.0\n").unwrap();
    assert_eq!(status(&["simulate", "--config", cfg.to_str().unwrap(), tmp.path().join("x").to_str().unwrap()]), Some(1));
}
