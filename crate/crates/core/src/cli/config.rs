//! Flat `key = value` run configuration covering the scene, the solver, the
//! robust loss, the evaluation and the experiment seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::estimator::SolverConfig;
use crate::evaluation::{AlignmentMode, DEFAULT_RDE_STEP};
use crate::factors::RobustLossConfig;
use crate::geometry::Intrinsics;
use crate::simulator::{SceneConfig, TrajectoryShape};

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the simulated scene and its observation noise.
    pub seed: u64,
    pub landmark_count: usize,
    pub plane_height: f64,
    pub roughness: f64,
    pub extent_x: f64,
    pub extent_y: f64,
    pub pixel_noise: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    /// `straight` or `lawnmower`.
    pub trajectory: String,
    pub frame_count: usize,
    pub altitude: f64,
    pub speed: f64,
    pub frame_rate: f64,
    pub rows: usize,
    pub row_spacing: f64,
    pub attitude_wobble_deg: f64,
    pub normal_noise_deg: f64,
    pub track_length: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Smallest usable disparity, for both the simulator and the estimator.
    pub min_disparity: f64,

    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub chi2_threshold: f64,
    pub normal_init_window: usize,
    pub covisibility_threshold: usize,
    pub max_local_keyframes: usize,
    pub keyframe_inlier_ratio: f64,
    pub keyframe_max_gap: usize,
    pub min_tracking_observations: usize,
    pub min_inlier_fraction: f64,
    pub pixel_sigma: f64,
    pub track_with_normal: bool,

    pub lambda: f64,
    pub delta_repro: f64,
    pub delta_normal: f64,

    pub rde_delta: usize,
    /// `full` or `planar`.
    pub alignment: String,

    /// Scene seeds of `experiment`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let solver = SolverConfig::default();
        let loss = RobustLossConfig::default();
        Self {
            seed: scene.seed,
            landmark_count: scene.landmark_count,
            plane_height: scene.plane_height,
            roughness: scene.roughness,
            extent_x: scene.extent_x,
            extent_y: scene.extent_y,
            pixel_noise: scene.pixel_noise,
            outlier_rate: scene.outlier_rate,
            outlier_magnitude: scene.outlier_magnitude,
            trajectory: scene.shape.name().to_string(),
            frame_count: scene.frame_count,
            altitude: scene.altitude,
            speed: scene.speed,
            frame_rate: scene.frame_rate,
            rows: scene.rows,
            row_spacing: scene.row_spacing,
            attitude_wobble_deg: scene.attitude_wobble_deg,
            normal_noise_deg: scene.normal_noise_deg,
            track_length: scene.track_length,
            fx: scene.intrinsics.fx,
            fy: scene.intrinsics.fy,
            cx: scene.intrinsics.cx,
            cy: scene.intrinsics.cy,
            baseline: scene.intrinsics.baseline,
            image_width: scene.image_width,
            image_height: scene.image_height,
            min_disparity: scene.min_disparity,
            max_iterations: solver.max_iterations,
            initial_damping: solver.initial_damping,
            damping_increase: solver.damping_increase,
            damping_decrease: solver.damping_decrease,
            max_damping: solver.max_damping,
            step_tolerance: solver.step_tolerance,
            cost_tolerance: solver.cost_tolerance,
            chi2_threshold: solver.chi2_threshold,
            normal_init_window: solver.normal_init_window,
            covisibility_threshold: solver.covisibility_threshold,
            max_local_keyframes: solver.max_local_keyframes,
            keyframe_inlier_ratio: solver.keyframe_inlier_ratio,
            keyframe_max_gap: solver.keyframe_max_gap,
            min_tracking_observations: solver.min_tracking_observations,
            min_inlier_fraction: solver.min_inlier_fraction,
            pixel_sigma: solver.pixel_sigma,
            track_with_normal: solver.track_with_normal,
            lambda: loss.lambda,
            delta_repro: loss.delta_repro,
            delta_normal: loss.delta_normal,
            rde_delta: DEFAULT_RDE_STEP,
            alignment: "full".to_string(),
            seeds: (1..=10).collect(),
        }
    }
}

impl RunConfig {
    /// Parses and validates configuration text.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key with its value, in declaration order; [`RunConfig::parse`]
    /// reads it back unchanged.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: String| CliError::Config(e);
        self.scene_config()?.validate().map_err(|e| config(e.to_string()))?;
        self.solver_config().validate().map_err(|e| config(e.to_string()))?;
        self.alignment_mode()?;
        if self.rde_delta == 0 {
            return Err(config("rde_delta must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<TrajectoryShape, CliError> {
        TrajectoryShape::parse(&self.trajectory).ok_or_else(|| {
            CliError::Config(format!("trajectory must be `straight` or `lawnmower`, got `{}`", self.trajectory))
        })
    }

    pub fn alignment_mode(&self) -> Result<AlignmentMode, CliError> {
        match self.alignment.as_str() {
            "full" => Ok(AlignmentMode::Full),
            "planar" => Ok(AlignmentMode::Planar),
            other => Err(CliError::Config(format!("alignment must be `full` or `planar`, got `{other}`"))),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, baseline: self.baseline }
    }

    pub fn scene_config(&self) -> Result<SceneConfig, CliError> {
        Ok(SceneConfig {
            landmark_count: self.landmark_count,
            plane_height: self.plane_height,
            roughness: self.roughness,
            extent_x: self.extent_x,
            extent_y: self.extent_y,
            pixel_noise: self.pixel_noise,
            outlier_rate: self.outlier_rate,
            outlier_magnitude: self.outlier_magnitude,
            shape: self.shape()?,
            frame_count: self.frame_count,
            altitude: self.altitude,
            speed: self.speed,
            frame_rate: self.frame_rate,
            rows: self.rows,
            row_spacing: self.row_spacing,
            attitude_wobble_deg: self.attitude_wobble_deg,
            normal_noise_deg: self.normal_noise_deg,
            track_length: self.track_length,
            intrinsics: self.intrinsics(),
            image_width: self.image_width,
            image_height: self.image_height,
            min_disparity: self.min_disparity,
            seed: self.seed,
        })
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iterations,
            initial_damping: self.initial_damping,
            damping_increase: self.damping_increase,
            damping_decrease: self.damping_decrease,
            max_damping: self.max_damping,
            step_tolerance: self.step_tolerance,
            cost_tolerance: self.cost_tolerance,
            chi2_threshold: self.chi2_threshold,
            normal_init_window: self.normal_init_window,
            covisibility_threshold: self.covisibility_threshold,
            max_local_keyframes: self.max_local_keyframes,
            keyframe_inlier_ratio: self.keyframe_inlier_ratio,
            keyframe_max_gap: self.keyframe_max_gap,
            min_tracking_observations: self.min_tracking_observations,
            min_inlier_fraction: self.min_inlier_fraction,
            min_disparity: self.min_disparity,
            pixel_sigma: self.pixel_sigma,
            track_with_normal: self.track_with_normal,
            loss: RobustLossConfig { delta_repro: self.delta_repro, delta_normal: self.delta_normal, lambda: self.lambda },
        }
    }
}
