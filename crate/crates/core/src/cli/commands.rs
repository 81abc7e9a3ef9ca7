use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::RunConfig;
use super::formats::{
    format_trajectory, read_trajectory, records_from_world_to_camera, records_to_trajectory, write_file, Dataset,
    TrajectoryRecord, CONFIG_FILE,
};
use super::CliError;
use crate::estimator::{run_sequence, SequenceStats};
use crate::evaluation::{align, associate, ate, report_csv, report_table, rde, AlignmentMode, Evaluation, ReportRow};
use crate::simulator::simulate;

pub const NORMAL_METHOD: &str = "normal";
pub const BASELINE_METHOD: &str = "baseline";

/// Creates `dir`, refusing a non-empty existing one unless `force` is set.
fn prepare_output_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::OutputExists(dir.display().to_string()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Simulates a sequence from `cfg` and writes it as a dataset directory,
/// together with the configuration that produced it.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Dataset, CliError> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let seq = simulate(&cfg.scene_config()?)?;
    let dataset = Dataset::from_sequence(&seq);
    dataset.write(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let outliers = dataset.observations.iter().filter(|o| o.is_outlier).count();
    info!(
        "simulated {} frames, {} landmarks, {} observations ({} outliers) into {}",
        dataset.ground_truth.len(),
        dataset.landmarks.len(),
        dataset.observations.len(),
        outliers,
        out.display()
    );
    Ok(dataset)
}

/// Overrides applied on top of the run configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Sets λ = 0: reprojection-only tracking and BA.
    pub no_normal: bool,
    pub lambda: Option<f64>,
    /// Recorded in the configuration; the estimator itself draws no random
    /// numbers.
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn apply(&self, cfg: &RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = cfg.clone();
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if self.no_normal {
            cfg.lambda = 0.0;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Estimated camera-to-world trajectory.
    pub records: Vec<TrajectoryRecord>,
    pub stats: SequenceStats,
}

/// Runs the estimator over a dataset held in memory.
pub fn run_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let solver = cfg.solver_config();
    let stream = dataset.to_stream(solver.pixel_sigma);
    let result = run_sequence(&stream, &solver)?;
    info!(
        "lambda {}: {} keyframes, normal factors {}, normal cost {:.6e}, reprojection cost {:.6e}",
        cfg.lambda,
        result.stats.keyframes,
        result.stats.normal_factors,
        result.stats.normal_cost,
        result.stats.reprojection_cost
    );
    let records = records_from_world_to_camera(result.trajectory.iter().map(|(_, t, p)| (*t, p)));
    Ok(RunOutcome { records, stats: result.stats })
}

/// Runs the estimator on the dataset in `dataset_dir` and writes the
/// estimated trajectory to `output`. Without an explicit configuration the
/// dataset's `config_used.txt` is used, or the defaults if it is absent.
pub fn cmd_run(dataset_dir: &Path, output: &Path, config: Option<&RunConfig>, options: &RunOptions) -> Result<RunOutcome, CliError> {
    let base = match config {
        Some(c) => c.clone(),
        None => {
            let recorded = dataset_dir.join(CONFIG_FILE);
            if recorded.exists() {
                RunConfig::load(&recorded)?
            } else {
                warn!("{} not found; using default settings", recorded.display());
                RunConfig::default()
            }
        }
    };
    let cfg = options.apply(&base)?;
    let dataset = Dataset::load(dataset_dir)?;
    let outcome = run_dataset(&dataset, &cfg)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_file(output, &format_trajectory(&outcome.records))?;
    Ok(outcome)
}

fn per_frame_csv(timestamps: &[f64], errors: &[f64]) -> String {
    let mut s = String::from("timestamp,error\n");
    for (t, e) in timestamps.iter().zip(errors) {
        let _ = writeln!(s, "{t},{e}");
    }
    s
}

fn evaluate_records(
    est: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    mode: AlignmentMode,
    delta: usize,
) -> Result<(Evaluation, Vec<f64>), CliError> {
    let matched = associate(&records_to_trajectory(est)?, &records_to_trajectory(gt)?)?;
    let s = align(&matched.estimate, &matched.ground_truth, mode)?;
    let mut ate = ate(&matched.estimate, &matched.ground_truth, &s)?;
    let mut rde = rde(&matched.estimate, &matched.ground_truth, delta)?;
    ate.dropped = matched.dropped;
    rde.dropped = matched.dropped;
    Ok((Evaluation { alignment: s, ate, rde }, matched.estimate.timestamps().to_vec()))
}

/// Writes `report.txt` (ATE and RDE tables), `summary.csv`, and the
/// per-frame errors `ate.csv` and `rde.csv`.
fn write_evaluation(dir: &Path, name: &str, eval: &Evaluation, timestamps: &[f64]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let ate_rows = [ReportRow { dataset: name.to_string(), method: "estimate".into(), report: eval.ate.clone() }];
    let rde_rows = [ReportRow { dataset: name.to_string(), method: "estimate".into(), report: eval.rde.clone() }];
    let report = format!("{}\n{}", report_table("ATE (m)", &ate_rows), report_table("RDE (m)", &rde_rows));
    write_file(&dir.join("report.txt"), &report)?;
    let summary = report_csv("ate", &ate_rows) + report_csv("rde", &rde_rows).split_once('\n').map_or("", |x| x.1);
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("ate.csv"), &per_frame_csv(timestamps, &eval.ate.errors))?;
    write_file(&dir.join("rde.csv"), &per_frame_csv(timestamps, &eval.rde.errors))
}

/// Compares an estimated trajectory file with a ground-truth file and
/// writes the reports into `out_dir`.
pub fn cmd_evaluate(est: &Path, gt: &Path, delta: usize, mode: AlignmentMode, out_dir: &Path) -> Result<Evaluation, CliError> {
    if delta == 0 {
        return Err(CliError::Usage("--delta must be positive".into()));
    }
    let (eval, timestamps) = evaluate_records(&read_trajectory(est)?, &read_trajectory(gt)?, mode, delta)?;
    let name = est.file_stem().map_or("estimate".into(), |s| s.to_string_lossy().into_owned());
    write_evaluation(out_dir, &name, &eval, &timestamps)?;
    info!("ATE RMSE {:.6} m, RDE mean {:.6} m over {} poses", eval.ate.rmse, eval.rde.mean, eval.ate.errors.len());
    Ok(eval)
}

/// One estimator mode on one seed.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub method: &'static str,
    pub lambda: f64,
    /// The evaluation, or the message of the failure that stopped the run.
    pub result: Result<Evaluation, String>,
    pub keyframes: usize,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Normal-constrained mode first, then the baseline.
    pub modes: Vec<ModeOutcome>,
}

impl SeedOutcome {
    pub fn completed(&self) -> bool {
        self.modes.iter().all(|m| m.result.is_ok())
    }

    pub fn evaluation(&self, method: &str) -> Option<&Evaluation> {
        self.modes.iter().find(|m| m.method == method).and_then(|m| m.result.as_ref().ok())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub seeds: Vec<SeedOutcome>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ExperimentSummary {
    /// Seeds on which both modes finished.
    pub fn completed(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter(|s| s.completed())
    }

    /// Median over completed seeds of the per-seed ATE RMSE of `method`.
    pub fn median_ate_rmse(&self, method: &str) -> Option<f64> {
        median(self.completed().filter_map(|s| s.evaluation(method)).map(|e| e.ate.rmse).collect())
    }

    /// Median normal-mode ATE RMSE over the baseline's.
    pub fn ate_ratio(&self) -> Option<f64> {
        Some(self.median_ate_rmse(NORMAL_METHOD)? / self.median_ate_rmse(BASELINE_METHOD)?)
    }

    /// Completed seeds whose normal-mode RDE mean is strictly below the
    /// baseline's.
    pub fn rde_wins(&self) -> usize {
        self.completed()
            .filter(|s| match (s.evaluation(NORMAL_METHOD), s.evaluation(BASELINE_METHOD)) {
                (Some(n), Some(b)) => n.rde.mean < b.rde.mean,
                _ => false,
            })
            .count()
    }

    fn rows(&self, pick: impl Fn(&Evaluation) -> &crate::evaluation::MetricReport) -> Vec<ReportRow> {
        self.completed()
            .flat_map(|s| {
                s.modes.iter().map(move |m| (s.seed, m)).collect::<Vec<_>>()
            })
            .map(|(seed, m)| ReportRow {
                dataset: format!("seed {seed}"),
                method: m.method.to_string(),
                report: pick(m.result.as_ref().expect("completed seed")).clone(),
            })
            .collect()
    }

    /// Per-seed tables of both modes with pooled totals, the failed seeds,
    /// and the median ATE ratio and RDE win count.
    pub fn report(&self) -> String {
        let mut s = report_table("ATE (m)", &self.rows(|e| &e.ate));
        s.push('\n');
        s.push_str(&report_table("RDE (m)", &self.rows(|e| &e.rde)));
        s.push('\n');
        for seed in self.seeds.iter().filter(|s| !s.completed()) {
            for m in &seed.modes {
                if let Err(e) = &m.result {
                    let _ = writeln!(s, "FAILED seed {} {}: {e}", seed.seed, m.method);
                }
            }
        }
        let completed = self.completed().count();
        let _ = writeln!(s, "completed seeds: {completed} of {}", self.seeds.len());
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "median ATE RMSE {NORMAL_METHOD}: {} m", fmt(self.median_ate_rmse(NORMAL_METHOD)));
        let _ = writeln!(s, "median ATE RMSE {BASELINE_METHOD}: {} m", fmt(self.median_ate_rmse(BASELINE_METHOD)));
        let _ = writeln!(s, "median ATE ratio {NORMAL_METHOD}/{BASELINE_METHOD}: {}", fmt(self.ate_ratio()));
        let _ = writeln!(s, "seeds with lower RDE mean under {NORMAL_METHOD}: {} of {completed}", self.rde_wins());
        s
    }

    /// One line per seed and mode; failed runs carry their error in `status`.
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "seed,method,lambda,status,keyframes,ate_mean,ate_median,ate_rmse,ate_sd,rde_mean,rde_median,rde_rmse,rde_sd\n",
        );
        for seed in &self.seeds {
            for m in &seed.modes {
                match &m.result {
                    Ok(e) => {
                        let _ = writeln!(
                            s,
                            "{},{},{},ok,{},{},{},{},{},{},{},{},{}",
                            seed.seed,
                            m.method,
                            m.lambda,
                            m.keyframes,
                            e.ate.mean,
                            e.ate.median,
                            e.ate.rmse,
                            e.ate.sd,
                            e.rde.mean,
                            e.rde.median,
                            e.rde.rmse,
                            e.rde.sd
                        );
                    }
                    Err(err) => {
                        let status = format!("\"failed: {}\"", err.replace('"', "'"));
                        let _ = writeln!(s, "{},{},{},{status},,,,,,,,,", seed.seed, m.method, m.lambda);
                    }
                }
            }
        }
        s
    }
}

fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedOutcome, CliError> {
    let cfg = RunConfig { seed, ..cfg.clone() };
    let dataset = cmd_simulate(&cfg, &dir.join("dataset"), true)?;
    let mode = cfg.alignment_mode()?;
    let mut modes = Vec::new();
    for (method, lambda) in [(NORMAL_METHOD, cfg.lambda), (BASELINE_METHOD, 0.0)] {
        let run_cfg = RunConfig { lambda, ..cfg.clone() };
        let outcome = run_dataset(&dataset, &run_cfg).and_then(|run| {
            write_file(&dir.join(format!("est_{method}.txt")), &format_trajectory(&run.records))?;
            let (eval, timestamps) = evaluate_records(&run.records, &dataset.ground_truth, mode, cfg.rde_delta)?;
            write_evaluation(&dir.join(format!("eval_{method}")), method, &eval, &timestamps)?;
            Ok((eval, run.stats.keyframes))
        });
        let (result, keyframes) = match outcome {
            Ok((eval, kfs)) => {
                info!("seed {seed} {method}: ATE RMSE {:.6} m, RDE mean {:.6} m", eval.ate.rmse, eval.rde.mean);
                (Ok(eval), kfs)
            }
            Err(e) => {
                warn!("seed {seed} {method}: {e}");
                (Err(e.to_string()), 0)
            }
        };
        modes.push(ModeOutcome { method, lambda, result, keyframes });
    }
    Ok(SeedOutcome { seed, modes })
}

/// Simulates every seed of `cfg.seeds`, runs both modes on each, evaluates
/// them and writes per-seed directories plus `summary.txt` and
/// `per_seed.csv` into `out_dir`. Seeds are spread over the available
/// cores; a failing run is flagged and the remaining seeds continue.
pub fn cmd_experiment(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<ExperimentSummary, CliError> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("seeds must list at least one seed".into()));
    }
    prepare_output_dir(out_dir, force)?;
    write_file(&out_dir.join(CONFIG_FILE), &cfg.to_text())?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.seeds.len());
    let dirs: Vec<PathBuf> = cfg.seeds.iter().map(|s| out_dir.join(format!("seed_{s}"))).collect();
    let mut results: Vec<Option<Result<SeedOutcome, CliError>>> = vec![None; cfg.seeds.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let dirs = &dirs;
                scope.spawn(move || {
                    (w..cfg.seeds.len())
                        .step_by(workers)
                        .map(|i| (i, run_seed(cfg, cfg.seeds[i], &dirs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("experiment worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let seeds = results
        .into_iter()
        .map(|r| r.expect("every seed assigned to a worker"))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = ExperimentSummary { seeds };
    write_file(&out_dir.join("summary.txt"), &summary.report())?;
    write_file(&out_dir.join("per_seed.csv"), &summary.csv())?;
    Ok(summary)
}
