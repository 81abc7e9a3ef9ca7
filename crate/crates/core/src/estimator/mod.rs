//! Stereo VO back-end: pose-only tracking, keyframe management, local bundle
//! adjustment with surface-normal factors, and χ² outlier rejection.

mod map;
mod mapping;
mod pipeline;
mod problems;
mod solver;
mod tracking;

pub use map::{Keyframe, Landmark, MapObservation, MapState};
pub use mapping::{
    insert_keyframe, local_bundle_adjustment, reject_outliers, select_keyframe, BaSummary, KeyframeInput,
    RejectScope, RejectionSummary,
};
pub use pipeline::{run_sequence, FrameInput, ObservationStream, SequenceResult, SequenceStats};
pub use solver::{CostBreakdown, SolveSummary};
pub use tracking::{motion_model_prediction, track_frame, TrackResult};

use thiserror::Error;

use crate::factors::{RobustLossConfig, CHI2_3DOF_95};
use crate::geometry::DEFAULT_MIN_DISPARITY;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("tracking lost at frame {frame_id}: {reason}")]
    TrackingLost { frame_id: usize, reason: String },
    #[error("solver diverged: damping {damping:e} exceeded its ceiling without decreasing the cost")]
    SolverDiverged { damping: f64 },
    #[error("bundle adjustment needs at least two keyframes")]
    NotEnoughKeyframes,
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Everything the estimator can be tuned with.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Damping above which a step that still raises the cost is a divergence.
    pub max_damping: f64,
    pub step_tolerance: f64,
    /// Relative cost decrease below which the solver stops.
    pub cost_tolerance: f64,
    /// Threshold on the whitened squared reprojection residual norm.
    pub chi2_threshold: f64,
    /// Keyframes during which the world normal stays in the optimization.
    pub normal_init_window: usize,
    pub covisibility_threshold: usize,
    /// Upper bound on the number of free keyframes in one local BA.
    pub max_local_keyframes: usize,
    pub keyframe_inlier_ratio: f64,
    pub keyframe_max_gap: usize,
    pub min_tracking_observations: usize,
    pub min_inlier_fraction: f64,
    pub min_disparity: f64,
    /// Pixel standard deviation assumed by the observation weights.
    pub pixel_sigma: f64,
    /// Include the frame normal in pose-only tracking.
    pub track_with_normal: bool,
    pub loss: RobustLossConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_damping: 1e14,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            chi2_threshold: CHI2_3DOF_95,
            normal_init_window: 10,
            covisibility_threshold: 15,
            max_local_keyframes: 10,
            keyframe_inlier_ratio: 0.9,
            keyframe_max_gap: 5,
            min_tracking_observations: 6,
            min_inlier_fraction: 0.5,
            min_disparity: DEFAULT_MIN_DISPARITY,
            pixel_sigma: 1.0,
            track_with_normal: true,
            loss: RobustLossConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.initial_damping > 0.0) || !(self.max_damping > self.initial_damping) {
            return bad("damping must satisfy 0 < initial_damping < max_damping");
        }
        if !(self.damping_increase > 1.0) || !(self.damping_decrease > 1.0) {
            return bad("damping factors must exceed 1");
        }
        if !(self.step_tolerance > 0.0) || !(self.cost_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.chi2_threshold > 0.0) {
            return bad("chi2_threshold must be positive");
        }
        if self.max_local_keyframes == 0 || self.keyframe_max_gap == 0 {
            return bad("max_local_keyframes and keyframe_max_gap must be positive");
        }
        if !(self.keyframe_inlier_ratio > 0.0 && self.keyframe_inlier_ratio <= 1.0) {
            return bad("keyframe_inlier_ratio must lie in (0, 1]");
        }
        if !(self.min_inlier_fraction >= 0.0 && self.min_inlier_fraction <= 1.0) {
            return bad("min_inlier_fraction must lie in [0, 1]");
        }
        if self.min_tracking_observations < 3 {
            return bad("min_tracking_observations must be at least 3");
        }
        if !(self.min_disparity >= 0.0) || !(self.pixel_sigma > 0.0) {
            return bad("min_disparity must be non-negative and pixel_sigma positive");
        }
        self.loss.validate().map_err(|e| EstimatorError::InvalidConfig(e.to_string()))
    }

    /// Inverse-variance weight of a stereo observation.
    pub fn observation_weight(&self) -> f64 {
        1.0 / (self.pixel_sigma * self.pixel_sigma)
    }

    pub fn uses_normals(&self) -> bool {
        self.loss.lambda > 0.0
    }
}
