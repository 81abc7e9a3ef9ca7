//! Trajectory alignment and the absolute/relative trajectory error metrics.
//!
//! Trajectories hold camera-to-world poses (the camera's pose in its world
//! frame), the convention of the trajectory files. Both metrics reduce a
//! relative transform to its x–y translation and report the Euclidean norm.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix2, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{rotation_about, PoseSE3};

/// Frame step of the relative displacement error.
pub const DEFAULT_RDE_STEP: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("alignment needs at least 3 matched poses, got {0}")]
    TooFewPoses(usize),
    #[error("timestamps do not match: {0}")]
    TimestampMismatch(String),
    #[error("sequence of {len} poses is too short for step {step}")]
    SequenceTooShort { len: usize, step: usize },
    #[error("timestamps must be strictly increasing (record {0})")]
    UnorderedTimestamps(usize),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    /// Camera-to-world records with strictly increasing timestamps.
    pub fn new(records: Vec<(f64, PoseSE3)>) -> Result<Self, EvaluationError> {
        for (i, w) in records.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(EvaluationError::UnorderedTimestamps(i + 1));
            }
        }
        let (timestamps, poses) = records.into_iter().unzip();
        Ok(Self { timestamps, poses })
    }

    /// Builds a trajectory from world-to-camera poses, as produced by the
    /// estimator and the simulator.
    pub fn from_world_to_camera(records: impl IntoIterator<Item = (f64, PoseSE3)>) -> Result<Self, EvaluationError> {
        Self::new(records.into_iter().map(|(t, p)| (t, p.inverse())).collect())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn records(&self) -> impl Iterator<Item = (f64, &PoseSE3)> + '_ {
        self.timestamps.iter().copied().zip(&self.poses)
    }

    /// Median spacing between consecutive timestamps.
    pub fn frame_period(&self) -> Option<f64> {
        let mut d: Vec<f64> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        if d.is_empty() {
            return None;
        }
        d.sort_by(f64::total_cmp);
        Some(d[d.len() / 2])
    }

    /// Applies `g` on the left of every pose, i.e. re-expresses the
    /// trajectory in another world frame.
    pub fn transformed(&self, g: &PoseSE3) -> Self {
        Self { timestamps: self.timestamps.clone(), poses: self.poses.iter().map(|p| g.compose(p)).collect() }
    }

    fn subset(&self, idx: impl Iterator<Item = usize>) -> Self {
        let (timestamps, poses) = idx.map(|i| (self.timestamps[i], self.poses[i])).unzip();
        Self { timestamps, poses }
    }
}

/// Two trajectories restricted to their matched records.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub estimate: Trajectory,
    pub ground_truth: Trajectory,
    /// Estimated poses without a ground-truth partner.
    pub dropped: usize,
}

fn tolerance(gt: &Trajectory, est: &Trajectory) -> f64 {
    0.5 * gt.frame_period().or(est.frame_period()).unwrap_or(f64::INFINITY)
}

/// Pairs every estimated pose with the nearest ground-truth pose in time,
/// keeping pairs closer than half a frame period. Each ground-truth pose is
/// used at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Result<Association, EvaluationError> {
    let tol = tolerance(gt, est);
    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (i, &t) in est.timestamps.iter().enumerate() {
        let j = gt.timestamps.partition_point(|&g| g < t);
        let nearest = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt.timestamps[a] - t).abs().total_cmp(&(gt.timestamps[b] - t).abs()));
        let Some(j) = nearest else { continue };
        let dt = (gt.timestamps[j] - t).abs();
        if dt <= tol && best.get(&j).is_none_or(|&(_, d)| dt < d) {
            best.insert(j, (i, dt));
        }
    }
    if best.is_empty() {
        return Err(EvaluationError::TimestampMismatch("no estimated pose has a ground-truth partner".into()));
    }
    let pairs: Vec<(usize, usize)> = best.iter().map(|(&j, &(i, _))| (i, j)).collect();
    Ok(Association {
        estimate: est.subset(pairs.iter().map(|p| p.0)),
        ground_truth: gt.subset(pairs.iter().map(|p| p.1)),
        dropped: est.len() - pairs.len(),
    })
}

fn check_matched(est: &Trajectory, gt: &Trajectory) -> Result<(), EvaluationError> {
    if est.len() != gt.len() {
        return Err(EvaluationError::TimestampMismatch(format!("{} estimated vs {} ground-truth poses", est.len(), gt.len())));
    }
    let tol = tolerance(gt, est);
    for (i, (a, b)) in est.timestamps.iter().zip(&gt.timestamps).enumerate() {
        if (a - b).abs() > tol {
            return Err(EvaluationError::TimestampMismatch(format!("record {i}: {a} vs {b}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentMode {
    /// Rotation and translation in 3D.
    #[default]
    Full,
    /// Rotation about z only, fitted on the x–y components; the z offset is
    /// the mean height difference.
    Planar,
}

/// Least-squares rigid transform `S` (no scale) mapping ground-truth
/// positions onto estimated ones: minimizes `Σ‖t_i − S t_i^gt‖²`.
pub fn align(est: &Trajectory, gt: &Trajectory, mode: AlignmentMode) -> Result<PoseSE3, EvaluationError> {
    check_matched(est, gt)?;
    if est.len() < 3 {
        return Err(EvaluationError::TooFewPoses(est.len()));
    }
    let a: Vec<Vector3<f64>> = gt.poses.iter().map(|p| p.translation).collect();
    let b: Vec<Vector3<f64>> = est.poses.iter().map(|p| p.translation).collect();
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let rotation = match mode {
        AlignmentMode::Full => {
            let h = a.iter().zip(&b).fold(Matrix3::zeros(), |h, (x, y)| h + (y - cb) * (x - ca).transpose());
            let svd = h.svd(true, true);
            let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
            let d = (u * v_t).determinant().signum();
            u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
        }
        AlignmentMode::Planar => {
            let h = a.iter().zip(&b).fold(Matrix2::zeros(), |h, (x, y)| {
                let (dx, dy) = (x - ca, y - cb);
                h + nalgebra::Vector2::new(dy.x, dy.y) * nalgebra::Vector2::new(dx.x, dx.y).transpose()
            });
            let yaw = (h[(1, 0)] - h[(0, 1)]).atan2(h[(0, 0)] + h[(1, 1)]);
            rotation_about(&Vector3::z(), yaw)
        }
    };
    Ok(PoseSE3::new(rotation, cb - rotation * ca))
}

/// Error statistics over a per-frame series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    /// Population standard deviation.
    pub sd: f64,
    /// Estimated poses dropped by timestamp association.
    pub dropped: usize,
}

impl MetricReport {
    pub fn from_errors(errors: Vec<f64>) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
        Self { errors, mean, median, rmse, sd, dropped: 0 }
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Statistics over the concatenation of several series.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Self {
        let mut dropped = 0;
        let mut all = Vec::new();
        for r in reports {
            all.extend_from_slice(&r.errors);
            dropped += r.dropped;
        }
        Self { dropped, ..Self::from_errors(all) }
    }
}

fn planar_norm(v: &Vector3<f64>) -> f64 {
    v.x.hypot(v.y)
}

/// Absolute trajectory error: `‖Π(T_i⁻¹ S T_i^gt)‖` per matched frame.
pub fn ate(est: &Trajectory, gt: &Trajectory, s: &PoseSE3) -> Result<MetricReport, EvaluationError> {
    check_matched(est, gt)?;
    let errors = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(t, g)| planar_norm(&t.inverse().compose(&s.compose(g)).translation))
        .collect();
    Ok(MetricReport::from_errors(errors))
}

/// Relative displacement error over a frame step `delta`: the difference of
/// the planar lengths of `T_i⁻¹ T_{i+Δ}` in both trajectories.
pub fn rde(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<MetricReport, EvaluationError> {
    check_matched(est, gt)?;
    if delta == 0 || est.len() <= delta {
        return Err(EvaluationError::SequenceTooShort { len: est.len(), step: delta });
    }
    let step = |p: &[PoseSE3], i: usize| planar_norm(&p[i].inverse().compose(&p[i + delta]).translation);
    let errors = (0..est.len() - delta).map(|i| (step(&est.poses, i) - step(&gt.poses, i)).abs()).collect();
    Ok(MetricReport::from_errors(errors))
}

/// ATE and RDE of an estimate against ground truth after association and
/// alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub alignment: PoseSE3,
    pub ate: MetricReport,
    pub rde: MetricReport,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory, mode: AlignmentMode, delta: usize) -> Result<Evaluation, EvaluationError> {
    let matched = associate(est, gt)?;
    let s = align(&matched.estimate, &matched.ground_truth, mode)?;
    let mut ate = ate(&matched.estimate, &matched.ground_truth, &s)?;
    let mut rde = rde(&matched.estimate, &matched.ground_truth, delta)?;
    ate.dropped = matched.dropped;
    rde.dropped = matched.dropped;
    Ok(Evaluation { alignment: s, ate, rde })
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub report: MetricReport,
}

/// Adds one "Total" row per method pooling the per-frame errors of all its
/// datasets, in order of first appearance.
pub fn with_totals(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = rows.to_vec();
    for m in methods {
        let report = MetricReport::pooled(rows.iter().filter(|r| r.method == m).map(|r| &r.report));
        out.push(ReportRow { dataset: "Total".into(), method: m.to_string(), report });
    }
    out
}

/// Plain-text table of mean/median/RMSE/SD per dataset and method, followed
/// by the pooled Total rows.
pub fn report_table(title: &str, rows: &[ReportRow]) -> String {
    let rows = with_totals(rows);
    let dw = rows.iter().map(|r| r.dataset.len()).chain(["Dataset".len()]).max().unwrap_or(0);
    let mw = rows.iter().map(|r| r.method.len()).chain(["Method".len()]).max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let header = format!(
        "{:<dw$}  {:<mw$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>7}",
        "Dataset", "Method", "Mean", "Median", "RMSE", "SD", "Frames"
    );
    let _ = writeln!(s, "{header}");
    let _ = writeln!(s, "{}", "-".repeat(header.len()));
    for r in &rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{:<dw$}  {:<mw$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>7}",
            r.dataset,
            r.method,
            m.mean,
            m.median,
            m.rmse,
            m.sd,
            m.errors.len()
        );
    }
    s
}

/// Machine-readable form of [`report_table`], with full precision.
pub fn report_csv(metric: &str, rows: &[ReportRow]) -> String {
    let mut s = String::from("metric,dataset,method,mean,median,rmse,sd,frames,dropped\n");
    for r in with_totals(rows) {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{metric},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            r.dataset,
            r.method,
            m.mean,
            m.median,
            m.rmse,
            m.sd,
            m.errors.len(),
            m.dropped
        );
    }
    s
}
