//! Pose-only tracking against the current map.

use nalgebra::Vector3;

use super::problems::{reprojection_error, NormalMeasurement, PoseOnlyProblem};
use super::solver::{minimize, SolveSummary};
use super::{EstimatorError, MapState, SolverConfig};
use crate::factors::{make_tangent_basis, FrameNormal, LandmarkId, StereoObservation};
use crate::geometry::{Intrinsics, Point3, PoseSE3};

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: PoseSE3,
    /// Landmarks whose observations pass the χ² test at the final pose.
    pub inliers: Vec<LandmarkId>,
    pub outliers: Vec<LandmarkId>,
    pub summary: SolveSummary,
}

impl TrackResult {
    pub fn candidates(&self) -> usize {
        self.inliers.len() + self.outliers.len()
    }
}

/// Constant-velocity prediction from the poses of the previous frames, oldest
/// first. No history gives the identity (the world frame is the first camera);
/// a single pose is repeated.
pub fn motion_model_prediction(previous: &[PoseSE3]) -> PoseSE3 {
    match previous {
        [] => PoseSE3::identity(),
        [only] => *only,
        [.., older, last] => {
            let velocity = last.compose(&older.inverse());
            // the product amplifies any rounding away from SO(3) frame after frame
            velocity.compose(last).renormalized()
        }
    }
}

/// Estimates the pose of one frame from its observations of mapped
/// landmarks, starting at `initial`.
///
/// Runs the damped solver, classifies every observation with the χ² test,
/// re-solves on the inliers and classifies again.
pub fn track_frame(
    k: &Intrinsics,
    map: &MapState,
    frame_id: usize,
    observations: &[StereoObservation],
    normal: Option<&FrameNormal>,
    initial: PoseSE3,
    cfg: &SolverConfig,
) -> Result<TrackResult, EstimatorError> {
    let lost = |reason: String| EstimatorError::TrackingLost { frame_id, reason };

    let mut ids = Vec::new();
    let mut points: Vec<Point3> = Vec::new();
    let mut pixels: Vec<Vector3<f64>> = Vec::new();
    let mut weights = Vec::new();
    for o in observations {
        if let Some(lm) = map.landmarks.get(&o.landmark_id) {
            ids.push(o.landmark_id);
            points.push(lm.position);
            pixels.push(o.pixel.to_vector());
            weights.push(o.weight);
        }
    }
    if ids.len() < cfg.min_tracking_observations {
        return Err(lost(format!(
            "{} observations of mapped landmarks, need {}",
            ids.len(),
            cfg.min_tracking_observations
        )));
    }

    let normal_term = match (normal, &map.global_normal) {
        (Some(n), Some(nw)) if cfg.track_with_normal && cfg.uses_normals() => {
            Some((NormalMeasurement { basis: make_tangent_basis(n), normal: *n }, *nw))
        }
        _ => None,
    };

    let classify = |pose: &PoseSE3| -> Vec<bool> {
        (0..ids.len())
            .map(|i| match reprojection_error(k, pose, &points[i], &pixels[i]) {
                Some(e) => weights[i] * e.norm_squared() <= cfg.chi2_threshold,
                None => false,
            })
            .collect()
    };

    let mut problem = PoseOnlyProblem::new(*k, &points, &pixels, &weights, normal_term, cfg.loss, initial);
    let first = minimize(&mut problem, cfg, cfg.max_iterations).map_err(|e| lost(e.to_string()))?;
    let pose = problem.pose;
    let mask = classify(&pose);

    let in_points: Vec<Point3> = select(&points, &mask);
    let in_pixels: Vec<Vector3<f64>> = select(&pixels, &mask);
    let in_weights: Vec<f64> = select(&weights, &mask);

    let (pose, summary) = if in_points.len() < ids.len() && in_points.len() >= cfg.min_tracking_observations {
        let mut refine = PoseOnlyProblem::new(*k, &in_points, &in_pixels, &in_weights, normal_term, cfg.loss, pose);
        let second = minimize(&mut refine, cfg, cfg.max_iterations).map_err(|e| lost(e.to_string()))?;
        let summary = SolveSummary {
            initial: first.initial,
            last: second.last,
            iterations: first.iterations + second.iterations,
            accepted_steps: first.accepted_steps + second.accepted_steps,
        };
        (refine.pose, summary)
    } else {
        (pose, first)
    };

    let mask = classify(&pose);
    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for (id, ok) in ids.iter().zip(mask) {
        if ok {
            inliers.push(*id);
        } else {
            outliers.push(*id);
        }
    }
    let needed = (cfg.min_inlier_fraction * ids.len() as f64).max(cfg.min_tracking_observations as f64);
    if (inliers.len() as f64) < needed {
        return Err(lost(format!("{} inliers out of {} candidates", inliers.len(), ids.len())));
    }
    Ok(TrackResult { pose, inliers, outliers, summary })
}

fn select<T: Copy>(v: &[T], mask: &[bool]) -> Vec<T> {
    v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()
}
