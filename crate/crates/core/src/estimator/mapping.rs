//! Keyframe insertion, local bundle adjustment and χ² outlier rejection.

use std::collections::{BTreeMap, BTreeSet};

use super::map::MapObservation;
use super::problems::{reprojection_error, BundleProblem, NormalMeasurement, WindowObservation};
use super::solver::{minimize, CostBreakdown, SolveSummary};
use super::{EstimatorError, MapState, SolverConfig};
use crate::factors::{FrameNormal, GlobalNormal, KeyframeId, LandmarkId, StereoObservation};
use crate::geometry::{triangulate, Intrinsics, PoseSE3};

/// Decides whether a tracked frame becomes a keyframe: either it sees
/// noticeably fewer inliers than the last keyframe observed, or too many
/// frames have passed since that keyframe.
pub fn select_keyframe(map: &MapState, frames_since_keyframe: usize, inlier_count: usize, cfg: &SolverConfig) -> bool {
    let Some(last) = map.last_keyframe() else {
        return true;
    };
    (inlier_count as f64) < cfg.keyframe_inlier_ratio * last.inserted_observations as f64
        || frames_since_keyframe >= cfg.keyframe_max_gap
}

/// A frame promoted to keyframe.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeInput<'a> {
    pub frame_id: usize,
    pub pose: PoseSE3,
    pub observations: &'a [StereoObservation],
    /// Observations of already mapped landmarks to link; `None` links all of
    /// them and leaves outliers to the χ² test of the next BA.
    pub inliers: Option<&'a [LandmarkId]>,
    pub normal: Option<FrameNormal>,
}

/// Adds a keyframe: links observations of mapped landmarks, triangulates
/// landmarks seen for the first time, seeds the world normal from the first
/// keyframe carrying a frame normal, and counts down the normal
/// initialization window.
pub fn insert_keyframe(k: &Intrinsics, map: &mut MapState, input: KeyframeInput<'_>, cfg: &SolverConfig) -> KeyframeId {
    let kf = map.add_keyframe(input.frame_id, input.pose, input.normal);
    if map.global_normal.is_none() {
        if let Some(n) = &input.normal {
            let nw = input.pose.rotation.transpose() * n.vector();
            map.global_normal = GlobalNormal::new(nw).ok();
        }
    }
    let inliers: Option<BTreeSet<LandmarkId>> = input.inliers.map(|s| s.iter().copied().collect());
    let camera_to_world = input.pose.inverse();
    for o in input.observations {
        let obs = MapObservation { pixel: o.pixel, weight: o.weight };
        if map.landmarks.contains_key(&o.landmark_id) {
            if inliers.as_ref().is_none_or(|s| s.contains(&o.landmark_id)) {
                map.add_observation(kf, o.landmark_id, obs);
            }
        } else if let Ok(pc) = triangulate(k, &o.pixel, cfg.min_disparity) {
            map.add_landmark(o.landmark_id, camera_to_world.transform_point(&pc));
            map.add_observation(kf, o.landmark_id, obs);
        }
    }
    let count = map.keyframes[&kf].landmarks.len();
    map.keyframes.get_mut(&kf).expect("just inserted").inserted_observations = count;
    map.normal_init_remaining = map.normal_init_remaining.saturating_sub(1);
    kf
}

/// Which observations [`reject_outliers`] examines.
#[derive(Debug, Clone)]
pub enum RejectScope {
    All,
    /// Every observation of these landmarks.
    Landmarks(BTreeSet<LandmarkId>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RejectionSummary {
    pub removed: Vec<(KeyframeId, LandmarkId)>,
    pub deleted_landmarks: Vec<LandmarkId>,
}

impl RejectionSummary {
    pub fn count(&self) -> usize {
        self.removed.len()
    }

    fn extend(&mut self, other: RejectionSummary) {
        self.removed.extend(other.removed);
        self.deleted_landmarks.extend(other.deleted_landmarks);
    }
}

/// Removes every observation whose whitened squared reprojection error
/// exceeds `threshold` (or whose point lies behind the camera), deleting
/// landmarks left without observations.
pub fn reject_outliers(k: &Intrinsics, map: &mut MapState, scope: &RejectScope, threshold: f64) -> RejectionSummary {
    let keys: Vec<(KeyframeId, LandmarkId)> = match scope {
        RejectScope::All => map.observations.keys().copied().collect(),
        RejectScope::Landmarks(set) => set
            .iter()
            .filter_map(|lm| map.landmarks.get(lm))
            .flat_map(|l| l.observers.iter().map(move |&kf| (kf, l.id)))
            .collect(),
    };
    let mut summary = RejectionSummary::default();
    for (kf, lm) in keys {
        let obs = map.observations[&(kf, lm)];
        let pose = map.keyframes[&kf].pose;
        let p = map.landmarks[&lm].position;
        let bad = match reprojection_error(k, &pose, &p, &obs.pixel.to_vector()) {
            Some(e) => obs.weight * e.norm_squared() > threshold,
            None => true,
        };
        if bad {
            summary.removed.push((kf, lm));
            if map.remove_observation(kf, lm) {
                summary.deleted_landmarks.push(lm);
            }
        }
    }
    summary
}

#[derive(Debug, Clone, Default)]
pub struct BaSummary {
    pub free_keyframes: Vec<KeyframeId>,
    pub fixed_keyframes: Vec<KeyframeId>,
    pub landmarks: usize,
    pub normal_optimized: bool,
    pub phases: Vec<SolveSummary>,
    pub rejected: RejectionSummary,
}

impl BaSummary {
    pub fn iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    pub fn initial_cost(&self) -> CostBreakdown {
        self.phases.first().map(|p| p.initial).unwrap_or_default()
    }

    pub fn final_cost(&self) -> CostBreakdown {
        self.phases.last().map(|p| p.last).unwrap_or_default()
    }
}

/// Free keyframes of a local BA around `current`: itself plus its most
/// covisible neighbours, never the gauge keyframe.
fn local_window(map: &MapState, current: KeyframeId, cfg: &SolverConfig) -> Vec<KeyframeId> {
    let gauge = map.first_keyframe();
    let mut free = Vec::new();
    let candidates = std::iter::once(current)
        .chain(map.covisible_keyframes(current, cfg.covisibility_threshold).into_iter().map(|(kf, _)| kf));
    for kf in candidates {
        if free.len() >= cfg.max_local_keyframes {
            break;
        }
        if Some(kf) != gauge {
            free.push(kf);
        }
    }
    free
}

/// Runs the solver for at most `iterations` on the window and writes the
/// result back into the map.
fn solve_window(
    k: &Intrinsics,
    map: &mut MapState,
    free: &[KeyframeId],
    cfg: &SolverConfig,
    iterations: usize,
    summary: &mut BaSummary,
) -> Result<BTreeSet<LandmarkId>, EstimatorError> {
    let free_set: BTreeSet<KeyframeId> = free.iter().copied().collect();
    let landmarks: BTreeSet<LandmarkId> = free.iter().flat_map(|kf| map.keyframes[kf].landmarks.iter().copied()).collect();
    let fixed: BTreeSet<KeyframeId> = landmarks
        .iter()
        .flat_map(|lm| map.landmarks[lm].observers.iter().copied())
        .filter(|kf| !free_set.contains(kf))
        .collect();

    let window: Vec<KeyframeId> = free.iter().copied().chain(fixed.iter().copied()).collect();
    let slots: BTreeMap<KeyframeId, usize> = window.iter().enumerate().map(|(i, &kf)| (kf, i)).collect();
    let landmark_ids: Vec<LandmarkId> = landmarks.iter().copied().collect();

    let mut observations = Vec::new();
    for (li, lm) in landmark_ids.iter().enumerate() {
        for kf in &map.landmarks[lm].observers {
            let o = map.observations[&(*kf, *lm)];
            observations.push(WindowObservation {
                keyframe: slots[kf],
                landmark: li,
                pixel: o.pixel.to_vector(),
                weight: o.weight,
            });
        }
    }
    let normals = window
        .iter()
        .map(|kf| {
            let k = &map.keyframes[kf];
            match (k.normal, k.basis) {
                (Some(normal), Some(basis)) => Some(NormalMeasurement { basis, normal }),
                _ => None,
            }
        })
        .collect();
    let normal_free = map.normal_is_free() && cfg.uses_normals();
    let mut problem = BundleProblem::new(
        *k,
        cfg.loss,
        window.iter().map(|kf| map.keyframes[kf].pose).collect(),
        free.len(),
        landmark_ids.iter().map(|lm| map.landmarks[lm].position).collect(),
        observations,
        normals,
        map.global_normal,
        normal_free,
    );
    let phase = minimize(&mut problem, cfg, iterations)?;

    for (kf, pose) in window.iter().zip(&problem.poses).take(free.len()) {
        map.keyframes.get_mut(kf).expect("window keyframe").pose = *pose;
    }
    for (lm, p) in landmark_ids.iter().zip(&problem.points) {
        map.landmarks.get_mut(lm).expect("window landmark").position = *p;
    }
    if normal_free {
        map.global_normal = problem.global_normal;
    }
    for (id, kf) in map.keyframes.iter_mut() {
        kf.fixed = !free_set.contains(id);
    }
    summary.free_keyframes = free.to_vec();
    summary.fixed_keyframes = fixed.into_iter().collect();
    summary.landmarks = landmark_ids.len();
    summary.normal_optimized = normal_free;
    summary.phases.push(phase);
    Ok(landmarks)
}

/// Local bundle adjustment around keyframe `current`.
///
/// Optimizes the current keyframe and its most covisible neighbours, every
/// landmark they observe and, while the initialization window is open, the
/// world normal. Other keyframes observing those landmarks enter with fixed
/// poses; the first keyframe is always fixed. Outliers are rejected after
/// half the iteration budget and again at the end.
pub fn local_bundle_adjustment(
    k: &Intrinsics,
    map: &mut MapState,
    current: KeyframeId,
    cfg: &SolverConfig,
) -> Result<BaSummary, EstimatorError> {
    if map.keyframes.len() < 2 {
        return Err(EstimatorError::NotEnoughKeyframes);
    }
    if !map.keyframes.contains_key(&current) {
        return Err(EstimatorError::UnknownKeyframe(current));
    }
    let free = local_window(map, current, cfg);
    let mut summary = BaSummary::default();
    let first_budget = (cfg.max_iterations / 2).max(1);
    let landmarks = solve_window(k, map, &free, cfg, first_budget, &mut summary)?;
    let mid = reject_outliers(k, map, &RejectScope::Landmarks(landmarks), cfg.chi2_threshold);
    let rest = cfg.max_iterations.saturating_sub(summary.iterations());
    let removed_any = mid.count() > 0;
    summary.rejected.extend(mid);
    if rest > 0 && (removed_any || summary.iterations() >= first_budget) {
        let landmarks = solve_window(k, map, &free, cfg, rest, &mut summary)?;
        let last = reject_outliers(k, map, &RejectScope::Landmarks(landmarks), cfg.chi2_threshold);
        summary.rejected.extend(last);
    }
    Ok(summary)
}
