//! Sequential track-then-map loop over an observation stream.

use std::collections::BTreeMap;

use log::{debug, info};

use super::mapping::{insert_keyframe, local_bundle_adjustment, select_keyframe, KeyframeInput};
use super::tracking::{motion_model_prediction, track_frame};
use super::{EstimatorError, MapState, SolverConfig};
use crate::factors::{FrameNormal, KeyframeId, StereoObservation};
use crate::geometry::{Intrinsics, PoseSE3};

/// Everything the back-end sees of one input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_id: usize,
    pub timestamp: f64,
    pub observations: Vec<StereoObservation>,
    pub normal: Option<FrameNormal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStream {
    pub intrinsics: Intrinsics,
    /// Ordered by frame id.
    pub frames: Vec<FrameInput>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SequenceStats {
    pub keyframes: usize,
    pub tracking_outliers: usize,
    pub ba_rejections: usize,
    /// Normal factors evaluated in the final cost of every solve.
    pub normal_factors: usize,
    /// Sum of the final normal costs of every solve.
    pub normal_cost: f64,
    pub reprojection_cost: f64,
    pub ba_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    /// `(frame_id, timestamp, world-to-camera pose)` per input frame.
    pub trajectory: Vec<(usize, f64, PoseSE3)>,
    pub map: MapState,
    pub stats: SequenceStats,
}

/// Runs tracking, keyframe selection, keyframe insertion and local BA over
/// every frame. Keyframe poses in the returned trajectory are their final
/// optimized values; other frames keep their tracked pose.
pub fn run_sequence(stream: &ObservationStream, cfg: &SolverConfig) -> Result<SequenceResult, EstimatorError> {
    cfg.validate()?;
    let k = &stream.intrinsics;
    let mut map = MapState::new(cfg.normal_init_window);
    let mut stats = SequenceStats::default();
    let mut tracked: Vec<(usize, f64, PoseSE3)> = Vec::with_capacity(stream.frames.len());
    let mut keyframe_of: BTreeMap<usize, KeyframeId> = BTreeMap::new();
    let mut history: Vec<PoseSE3> = Vec::new();
    let mut since_keyframe = 0usize;

    for frame in &stream.frames {
        let observations: Vec<StereoObservation> =
            frame.observations.iter().filter(|o| o.pixel.disparity() > cfg.min_disparity).copied().collect();

        if map.keyframes.is_empty() {
            let pose = PoseSE3::identity();
            let input = KeyframeInput {
                frame_id: frame.frame_id,
                pose,
                observations: &observations,
                inliers: None,
                normal: frame.normal,
            };
            let kf = insert_keyframe(k, &mut map, input, cfg);
            keyframe_of.insert(frame.frame_id, kf);
            tracked.push((frame.frame_id, frame.timestamp, pose));
            history.push(pose);
            since_keyframe = 0;
            continue;
        }

        let initial = motion_model_prediction(&history[history.len().saturating_sub(2)..]);
        let track = track_frame(k, &map, frame.frame_id, &observations, frame.normal.as_ref(), initial, cfg)?;
        stats.tracking_outliers += track.outliers.len();
        stats.normal_factors += track.summary.last.normal_factors;
        since_keyframe += 1;
        let mut pose = track.pose;

        if select_keyframe(&map, since_keyframe, track.inliers.len(), cfg) {
            let input = KeyframeInput {
                frame_id: frame.frame_id,
                pose,
                observations: &observations,
                inliers: None,
                normal: frame.normal,
            };
            let kf = insert_keyframe(k, &mut map, input, cfg);
            keyframe_of.insert(frame.frame_id, kf);
            let ba = local_bundle_adjustment(k, &mut map, kf, cfg)?;
            let cost = ba.final_cost();
            debug!(
                "frame {} keyframe {}: {} free, {} fixed, {} landmarks, {} iterations, cost {:.3e} -> reprojection {:.3e}, normal {:.3e} ({} factors), {} rejected",
                frame.frame_id,
                kf,
                ba.free_keyframes.len(),
                ba.fixed_keyframes.len(),
                ba.landmarks,
                ba.iterations(),
                ba.initial_cost().total(),
                cost.reprojection,
                cost.normal,
                cost.normal_factors,
                ba.rejected.count()
            );
            stats.keyframes += 1;
            stats.ba_rejections += ba.rejected.count();
            stats.normal_factors += cost.normal_factors;
            stats.normal_cost += cost.normal;
            stats.reprojection_cost += cost.reprojection;
            stats.ba_iterations += ba.iterations();
            pose = map.keyframes[&kf].pose;
            since_keyframe = 0;
        }
        tracked.push((frame.frame_id, frame.timestamp, pose));
        history.push(pose);
        if history.len() > 2 {
            history.remove(0);
        }
    }
    stats.keyframes = map.keyframes.len();

    let trajectory = tracked
        .into_iter()
        .map(|(id, ts, pose)| match keyframe_of.get(&id) {
            Some(kf) => (id, ts, map.keyframes[kf].pose),
            None => (id, ts, pose),
        })
        .collect();
    info!(
        "{} frames, {} keyframes, {} landmarks; BA reprojection cost {:.3}, normal cost {:.3} over {} normal factors",
        stream.frames.len(),
        stats.keyframes,
        map.landmarks.len(),
        stats.reprojection_cost,
        stats.normal_cost,
        stats.normal_factors
    );
    Ok(SequenceResult { trajectory, map, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, SceneConfig, TrajectoryShape};

    fn scene(frames: usize) -> SceneConfig {
        SceneConfig { shape: TrajectoryShape::Straight, frame_count: frames, landmark_count: 1500, ..SceneConfig::default() }
    }

    #[test]
    fn noiseless_stream_is_reproduced() {
        let seq = simulate(&scene(120).noiseless()).unwrap();
        let result = run_sequence(&seq.to_stream(1.0), &SolverConfig::default()).unwrap();
        assert_eq!(result.trajectory.len(), 120);
        for (id, _, pose) in &result.trajectory {
            let err = pose.max_abs_diff(&seq.ground_truth[*id]);
            assert!(err < 1e-6, "frame {id} off by {err:e}");
        }
        assert_eq!(result.trajectory[0].2, PoseSE3::identity());
        result.map.check_invariants().unwrap();
    }

    #[test]
    fn runs_are_deterministic() {
        let seq = simulate(&scene(60)).unwrap();
        let stream = seq.to_stream(1.0);
        let cfg = SolverConfig::default();
        let a = run_sequence(&stream, &cfg).unwrap();
        let b = run_sequence(&stream, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn visibility_gap_loses_tracking() {
        let seq = simulate(&scene(60).noiseless()).unwrap();
        let mut stream = seq.to_stream(1.0);
        for f in &mut stream.frames[30..50] {
            f.observations.clear();
        }
        let err = run_sequence(&stream, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, EstimatorError::TrackingLost { frame_id: 30, .. }), "{err}");
    }

    #[test]
    fn zero_lambda_adds_no_normal_factors() {
        let seq = simulate(&scene(40)).unwrap();
        let mut cfg = SolverConfig::default();
        cfg.loss.lambda = 0.0;
        let result = run_sequence(&seq.to_stream(1.0), &cfg).unwrap();
        assert_eq!(result.stats.normal_factors, 0);
        assert_eq!(result.stats.normal_cost, 0.0);
    }
}
