//! Synthetic near-planar scenes observed by a downward-looking stereo camera.
//!
//! Landmarks are scattered over a flat field with a small vertical roughness.
//! The camera flies at constant altitude along a straight line or a
//! lawn-mower sweep, with a slow roll/pitch wobble. Every frame gets noisy
//! stereo observations (some replaced by labeled gross outliers) and a frame
//! normal from a least-squares plane fit to the visible landmarks.
//!
//! Ground truth is expressed in the world frame of the estimator, which is
//! the first camera frame: the first ground-truth pose is the identity.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::estimator::{FrameInput, ObservationStream};
use crate::factors::{make_tangent_basis, FrameNormal, LandmarkId, StereoObservation};
use crate::geometry::{project, rotation_about, Intrinsics, Point3, PoseSE3, StereoPixel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("point cloud is degenerate for plane fitting ({0})")]
    DegenerateCloud(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryShape {
    Straight,
    Lawnmower,
}

impl TrajectoryShape {
    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryShape::Straight => "straight",
            TrajectoryShape::Lawnmower => "lawnmower",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(TrajectoryShape::Straight),
            "lawnmower" => Some(TrajectoryShape::Lawnmower),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub landmark_count: usize,
    /// Height of the ground plane in the field frame (m).
    pub plane_height: f64,
    /// Standard deviation of landmark heights about the plane (m).
    pub roughness: f64,
    /// Field size along x and y (m), centred on the trajectory.
    pub extent_x: f64,
    pub extent_y: f64,
    pub pixel_noise: f64,
    pub outlier_rate: f64,
    /// Pixel offset applied to outlier observations.
    pub outlier_magnitude: f64,
    pub shape: TrajectoryShape,
    pub frame_count: usize,
    /// Camera height in the field frame (m).
    pub altitude: f64,
    pub speed: f64,
    pub frame_rate: f64,
    pub rows: usize,
    pub row_spacing: f64,
    /// Amplitude of the roll and pitch oscillation (degrees).
    pub attitude_wobble_deg: f64,
    /// Standard deviation of the angular error added to frame normals (degrees).
    pub normal_noise_deg: f64,
    /// Frames after which a feature track breaks and the point is
    /// re-detected under a new landmark id; 0 keeps tracks unbroken.
    pub track_length: usize,
    pub intrinsics: Intrinsics,
    pub image_width: f64,
    pub image_height: f64,
    pub min_disparity: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            landmark_count: 3000,
            plane_height: 0.0,
            roughness: 0.01,
            extent_x: 40.0,
            extent_y: 20.0,
            pixel_noise: 0.5,
            outlier_rate: 0.05,
            outlier_magnitude: 50.0,
            shape: TrajectoryShape::Lawnmower,
            frame_count: 1500,
            altitude: 5.0,
            speed: 2.0,
            frame_rate: 30.0,
            rows: 3,
            row_spacing: 6.0,
            attitude_wobble_deg: 2.0,
            normal_noise_deg: 0.3,
            track_length: 0,
            intrinsics: Intrinsics { fx: 400.0, fy: 400.0, cx: 412.0, cy: 224.5, baseline: 0.05 },
            image_width: 824.0,
            image_height: 449.0,
            min_disparity: crate::geometry::DEFAULT_MIN_DISPARITY,
            seed: 42,
        }
    }
}

impl SceneConfig {
    /// A noiseless, outlier-free, perfectly flat variant of `self`.
    pub fn noiseless(&self) -> Self {
        Self { roughness: 0.0, pixel_noise: 0.0, outlier_rate: 0.0, normal_noise_deg: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidConfig(m.to_string()));
        let positive = [
            ("extent_x", self.extent_x),
            ("extent_y", self.extent_y),
            ("speed", self.speed),
            ("frame_rate", self.frame_rate),
            ("row_spacing", self.row_spacing),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        let non_negative = [
            ("roughness", self.roughness),
            ("pixel_noise", self.pixel_noise),
            ("outlier_magnitude", self.outlier_magnitude),
            ("attitude_wobble_deg", self.attitude_wobble_deg),
            ("normal_noise_deg", self.normal_noise_deg),
            ("min_disparity", self.min_disparity),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if !(self.altitude - self.plane_height > 0.0) {
            return bad("altitude must be above the plane");
        }
        if !(0.0..=0.5).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 0.5]");
        }
        if self.landmark_count == 0 || self.frame_count == 0 || self.rows == 0 {
            return bad("landmark_count, frame_count and rows must be positive");
        }
        if self.shape == TrajectoryShape::Lawnmower && self.row_length() <= 0.0 {
            return bad("trajectory too short for the requested rows and row spacing");
        }
        self.intrinsics.validate().map_err(|e| SimulationError::InvalidConfig(e.to_string()))
    }

    fn path_length(&self) -> f64 {
        self.speed * (self.frame_count.saturating_sub(1)) as f64 / self.frame_rate
    }

    fn turn_length(&self) -> f64 {
        PI * 0.5 * self.row_spacing
    }

    /// Length of one lawn-mower row such that the whole sweep takes exactly
    /// `frame_count` frames.
    pub fn row_length(&self) -> f64 {
        let turns = (self.rows - 1) as f64 * self.turn_length();
        (self.path_length() - turns) / self.rows as f64
    }
}

/// A stereo observation with its ground-truth outlier label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledObservation {
    pub landmark_id: LandmarkId,
    pub pixel: StereoPixel,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedFrame {
    pub frame_id: usize,
    pub timestamp: f64,
    pub observations: Vec<LabeledObservation>,
    pub normal: Option<FrameNormal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSequence {
    pub intrinsics: Intrinsics,
    /// World-to-camera ground truth per frame.
    pub ground_truth: Vec<PoseSE3>,
    /// World landmark positions indexed by landmark id.
    pub landmarks: Vec<Point3>,
    /// Unit world-frame plane normal pointing toward the camera.
    pub plane_normal: Vector3<f64>,
    pub frames: Vec<SimulatedFrame>,
}

impl SimulatedSequence {
    /// Index into `landmarks` of the point behind an observation's landmark
    /// id; ids differ from point indices only when feature tracks break.
    pub fn point_index(&self, landmark_id: LandmarkId) -> usize {
        landmark_id % self.landmarks.len()
    }

    /// The estimator's view of the sequence: observations weighted with
    /// `1/pixel_sigma²`, labels dropped.
    pub fn to_stream(&self, pixel_sigma: f64) -> ObservationStream {
        let weight = 1.0 / (pixel_sigma * pixel_sigma);
        let frames = self
            .frames
            .iter()
            .map(|f| FrameInput {
                frame_id: f.frame_id,
                timestamp: f.timestamp,
                observations: f
                    .observations
                    .iter()
                    .map(|o| StereoObservation::new(f.frame_id, o.landmark_id, o.pixel, weight))
                    .collect(),
                normal: f.normal,
            })
            .collect();
        ObservationStream { intrinsics: self.intrinsics, frames }
    }
}

/// Landmarks in the field frame (z up) and the ground-truth plane normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Point3>,
    /// Unit normal of the ground plane, pointing up.
    pub normal: Vector3<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scatters landmarks uniformly over the field at the plane height plus
/// Gaussian roughness.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene, SimulationError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0);
    let height = Normal::new(0.0, cfg.roughness).expect("validated roughness");
    let landmarks = (0..cfg.landmark_count)
        .map(|_| {
            let x = (rng.random::<f64>() - 0.5) * cfg.extent_x;
            let y = (rng.random::<f64>() - 0.5) * cfg.extent_y;
            let dz = if cfg.roughness > 0.0 { height.sample(&mut rng) } else { 0.0 };
            Point3::new(x, y, cfg.plane_height + dz)
        })
        .collect();
    Ok(Scene { landmarks, normal: Vector3::z() })
}

/// Position and heading of the camera on the path at arc length `s`.
fn path_point(cfg: &SceneConfig, s: f64) -> (Vector3<f64>, f64) {
    match cfg.shape {
        TrajectoryShape::Straight => {
            let start = -0.5 * cfg.path_length();
            (Vector3::new(start + s, 0.0, cfg.altitude), 0.0)
        }
        TrajectoryShape::Lawnmower => {
            let row = cfg.row_length();
            let turn = cfg.turn_length();
            let radius = 0.5 * cfg.row_spacing;
            let y0 = -0.5 * (cfg.rows - 1) as f64 * cfg.row_spacing;
            let mut rest = s;
            for r in 0..cfg.rows {
                let forward = r % 2 == 0;
                let sign = if forward { 1.0 } else { -1.0 };
                let x_start = -0.5 * row * sign;
                let y = y0 + r as f64 * cfg.row_spacing;
                let heading = if forward { 0.0 } else { PI };
                if rest <= row || r + 1 == cfg.rows {
                    return (Vector3::new(x_start + sign * rest, y, cfg.altitude), heading);
                }
                rest -= row;
                if rest <= turn {
                    // semicircle around the row end, turning left when moving +x
                    let angle = rest / radius;
                    let cx = x_start + sign * row;
                    let cy = y + radius;
                    let x = cx + sign * radius * angle.sin();
                    let yy = cy - radius * angle.cos();
                    let h = if forward { angle } else { PI - angle };
                    return (Vector3::new(x, yy, cfg.altitude), h);
                }
                rest -= turn;
            }
            unreachable!("the last row absorbs any remaining length")
        }
    }
}

/// Camera-to-field pose of frame `i`: a downward-looking camera with its x
/// axis along the heading, plus the roll/pitch wobble.
fn camera_in_field(cfg: &SceneConfig, i: usize) -> PoseSE3 {
    let t = i as f64 / cfg.frame_rate;
    let (center, heading) = path_point(cfg, cfg.speed * t);
    let h = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let down = -Vector3::z();
    let y = down.cross(&h);
    let base = Matrix3::from_columns(&[h, y, down]);
    let amp = cfg.attitude_wobble_deg.to_radians();
    let roll = amp * (2.0 * PI * t / 7.0).sin();
    let pitch = amp * (2.0 * PI * t / 11.0 + 1.0).sin();
    let wobble = rotation_about(&Vector3::x(), roll) * rotation_about(&Vector3::y(), pitch);
    PoseSE3::new(base * wobble, center)
}

/// Field-frame pose of the first camera; the world frame of the estimator.
fn world_in_field(cfg: &SceneConfig) -> PoseSE3 {
    camera_in_field(cfg, 0)
}

/// Ground-truth world-to-camera poses for every frame. The first pose is the
/// identity.
pub fn generate_trajectory(cfg: &SceneConfig) -> Result<Vec<PoseSE3>, SimulationError> {
    cfg.validate()?;
    let world = world_in_field(cfg);
    Ok((0..cfg.frame_count)
        .map(|i| {
            let camera_to_world = world.inverse().compose(&camera_in_field(cfg, i));
            camera_to_world.inverse()
        })
        .collect())
}

/// Projects the visible landmarks (positive depth, inside both images,
/// disparity above the minimum), adds pixel noise and swaps a fraction for
/// labeled outliers shifted by `outlier_magnitude` pixels in a random
/// direction.
pub fn render_observations(
    landmarks: &[Point3],
    pose: &PoseSE3,
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Vec<LabeledObservation> {
    let noise = Normal::new(0.0, cfg.pixel_noise).expect("validated noise");
    let mut out = Vec::new();
    for (id, p) in landmarks.iter().enumerate() {
        let Some(px) = visible_projection(cfg, &pose.transform_point(p)) else {
            continue;
        };
        let mut px = px;
        if cfg.pixel_noise > 0.0 {
            px.u_left += noise.sample(rng);
            px.v += noise.sample(rng);
            px.u_right += noise.sample(rng);
        }
        let is_outlier = cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate;
        if is_outlier {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let (du, dv) = (cfg.outlier_magnitude * angle.cos(), cfg.outlier_magnitude * angle.sin());
            px.u_left += du;
            px.u_right += du;
            px.v += dv;
        }
        out.push(LabeledObservation { landmark_id: id, pixel: px, is_outlier });
    }
    out
}

fn visible_projection(cfg: &SceneConfig, pc: &Point3) -> Option<StereoPixel> {
    let px = project(&cfg.intrinsics, pc).ok()?;
    let inside = |u: f64, limit: f64| (0.0..limit).contains(&u);
    (inside(px.u_left, cfg.image_width)
        && inside(px.u_right, cfg.image_width)
        && inside(px.v, cfg.image_height)
        && px.disparity() > cfg.min_disparity)
        .then_some(px)
}

/// Least-squares plane normal of a point cloud and its planarity score
/// (smallest over middle eigenvalue of the scatter matrix).
pub fn estimate_frame_normal(points: &[Point3]) -> Result<(FrameNormal, f64), SimulationError> {
    if points.len() < 3 {
        return Err(SimulationError::DegenerateCloud("fewer than three points"));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let scatter = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) =
        (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(largest > 0.0) || middle <= 1e-12 * largest {
        return Err(SimulationError::DegenerateCloud("points are collinear"));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let normal = FrameNormal::new(normal).map_err(|_| SimulationError::DegenerateCloud("no normal"))?;
    Ok((normal, smallest.max(0.0) / middle))
}

/// Rotates a unit normal by `angle` about a tangent axis at `azimuth`.
fn perturb_normal(n: &FrameNormal, angle: f64, azimuth: f64) -> FrameNormal {
    let b = make_tangent_basis(n);
    let axis = b.b0() * azimuth.cos() + b.b1() * azimuth.sin();
    let rotated = rotation_about(&axis, angle) * n.vector();
    FrameNormal::new(rotated).expect("rotation keeps unit length")
}

/// Generates a complete sequence: scene, trajectory, observations and frame normals.
pub fn simulate(cfg: &SceneConfig) -> Result<SimulatedSequence, SimulationError> {
    let scene = generate_scene(cfg)?;
    let ground_truth = generate_trajectory(cfg)?;
    let field_to_world = world_in_field(cfg).inverse();
    let landmarks: Vec<Point3> = scene.landmarks.iter().map(|p| field_to_world.transform_point(p)).collect();
    let plane_normal = field_to_world.rotation * scene.normal;
    let normal_noise = Normal::new(0.0, cfg.normal_noise_deg.to_radians()).expect("validated");
    let phases: Vec<usize> = if cfg.track_length > 0 {
        let mut rng = rng_for(cfg.seed, u64::MAX);
        (0..landmarks.len()).map(|_| rng.random_range(0..cfg.track_length)).collect()
    } else {
        vec![0; landmarks.len()]
    };
    let count = landmarks.len();

    let frames = ground_truth
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng = rng_for(cfg.seed, i as u64 + 1);
            let mut observations = render_observations(&landmarks, pose, cfg, &mut rng);
            let camera_points: Vec<Point3> =
                observations.iter().map(|o| pose.transform_point(&landmarks[o.landmark_id])).collect();
            let normal = estimate_frame_normal(&camera_points).ok().map(|(n, _)| {
                if cfg.normal_noise_deg > 0.0 {
                    let angle = normal_noise.sample(&mut rng);
                    let azimuth = rng.random::<f64>() * 2.0 * PI;
                    perturb_normal(&n, angle, azimuth)
                } else {
                    n
                }
            });
            for o in &mut observations {
                if let Some(track) = (i + phases[o.landmark_id]).checked_div(cfg.track_length) {
                    o.landmark_id += count * track;
                }
            }
            SimulatedFrame { frame_id: i, timestamp: i as f64 / cfg.frame_rate, observations, normal }
        })
        .collect();
    Ok(SimulatedSequence { intrinsics: cfg.intrinsics, ground_truth, landmarks, plane_normal, frames })
}
