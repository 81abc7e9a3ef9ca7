//! Plain-text dataset and trajectory files.
//!
//! | file | content |
//! |---|---|
//! | `intrinsics.txt` | `fx fy cx cy b` on one line |
//! | `traj_gt.txt`, estimates | `timestamp tx ty tz qx qy qz qw` per line, camera-to-world |
//! | `landmarks.csv` | `id,x,y,z` (world frame) |
//! | `obs.csv` | `frame_id,landmark_id,uL,v,uR,is_outlier` |
//! | `normals.csv` | `frame_id,nx,ny,nz` (camera frame) |
//!
//! Lines starting with `#` are comments in every file. Numbers are written
//! in the shortest form that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::CliError;
use crate::estimator::{FrameInput, ObservationStream};
use crate::evaluation::Trajectory;
use crate::factors::{FrameNormal, LandmarkId, StereoObservation};
use crate::geometry::{Intrinsics, Point3, PoseSE3, StereoPixel};
use crate::simulator::SimulatedSequence;

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const GROUND_TRUTH_FILE: &str = "traj_gt.txt";
pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const OBSERVATIONS_FILE: &str = "obs.csv";
pub const NORMALS_FILE: &str = "normals.csv";
pub const CONFIG_FILE: &str = "config_used.txt";

/// Deviation of a quaternion norm from one tolerated without a warning.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

/// One line of a trajectory file: a camera-to-world pose stamped in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryRecord {
    pub fn from_pose(timestamp: f64, camera_to_world: &PoseSE3) -> Self {
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(camera_to_world.rotation));
        Self { timestamp, translation: camera_to_world.translation, rotation }
    }

    /// Camera-to-world pose.
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::new(*self.rotation.to_rotation_matrix().matrix(), self.translation)
    }
}

/// Per-frame records from world-to-camera poses.
pub fn records_from_world_to_camera<'a>(poses: impl IntoIterator<Item = (f64, &'a PoseSE3)>) -> Vec<TrajectoryRecord> {
    poses.into_iter().map(|(t, p)| TrajectoryRecord::from_pose(t, &p.inverse())).collect()
}

pub fn records_to_trajectory(records: &[TrajectoryRecord]) -> Result<Trajectory, CliError> {
    Trajectory::new(records.iter().map(|r| (r.timestamp, r.pose())).collect()).map_err(CliError::Evaluation)
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> CliError {
    CliError::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Splits a line into exactly `n` fields on `sep` (whitespace when `None`).
fn fields<'a>(path: &Path, line: usize, text: &'a str, sep: Option<char>, n: usize) -> Result<Vec<&'a str>, CliError> {
    let parts: Vec<&str> = match sep {
        Some(c) => text.split(c).map(str::trim).collect(),
        None => text.split_whitespace().collect(),
    };
    if parts.len() != n {
        return Err(parse_error(path, line, format!("expected {n} fields, found {}", parts.len())));
    }
    Ok(parts)
}

fn number<T: std::str::FromStr>(path: &Path, line: usize, field: &str, name: &str) -> Result<T, CliError> {
    field.parse().map_err(|_| parse_error(path, line, format!("invalid {name} `{field}`")))
}

fn finite(path: &Path, line: usize, field: &str, name: &str) -> Result<f64, CliError> {
    let x: f64 = number(path, line, field, name)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(parse_error(path, line, format!("{name} is not finite")))
    }
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.baseline)
}

pub fn parse_intrinsics(path: &Path, text: &str) -> Result<Intrinsics, CliError> {
    let mut lines = data_lines(text);
    let (line, content) = lines.next().ok_or_else(|| parse_error(path, 1, "missing intrinsics line"))?;
    let f = fields(path, line, content, None, 5)?;
    let names = ["fx", "fy", "cx", "cy", "b"];
    let mut v = [0.0; 5];
    for i in 0..5 {
        v[i] = finite(path, line, f[i], names[i])?;
    }
    if let Some((extra, _)) = lines.next() {
        return Err(parse_error(path, extra, "unexpected content after the intrinsics line"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| parse_error(path, line, e.to_string()))
}

pub fn format_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for r in records {
        let t = &r.translation;
        let q = r.rotation.quaternion();
        let _ = writeln!(s, "{} {} {} {} {} {} {} {}", r.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w);
    }
    s
}

/// Reads trajectory records. Quaternions off unit norm by more than
/// [`QUATERNION_TOLERANCE`] are renormalized with a warning.
pub fn parse_trajectory(path: &Path, text: &str) -> Result<Vec<TrajectoryRecord>, CliError> {
    let mut out = Vec::new();
    for (line, content) in data_lines(text) {
        let f = fields(path, line, content, None, 8)?;
        let names = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"];
        let mut v = [0.0; 8];
        for i in 0..8 {
            v[i] = finite(path, line, f[i], names[i])?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if norm == 0.0 {
            return Err(parse_error(path, line, "zero quaternion"));
        }
        let rotation = if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            warn!("{}:{line}: quaternion norm {norm} renormalized", path.display());
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        if let Some(prev) = out.last().map(|r: &TrajectoryRecord| r.timestamp) {
            if !(v[0] > prev) {
                return Err(parse_error(path, line, "timestamps must be strictly increasing"));
            }
        }
        out.push(TrajectoryRecord { timestamp: v[0], translation: Vector3::new(v[1], v[2], v[3]), rotation });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, CliError> {
    parse_trajectory(path, &read(path)?)
}

pub fn format_landmarks(points: &[(LandmarkId, Point3)]) -> String {
    let mut s = String::from("id,x,y,z\n");
    for (id, p) in points {
        let _ = writeln!(s, "{id},{},{},{}", p.x, p.y, p.z);
    }
    s
}

/// Skips the header if present.
fn csv_rows<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> {
    data_lines(text).filter(move |(_, l)| *l != header)
}

pub fn parse_landmarks(path: &Path, text: &str) -> Result<Vec<(LandmarkId, Point3)>, CliError> {
    csv_rows(text, "id,x,y,z")
        .map(|(line, content)| {
            let f = fields(path, line, content, Some(','), 4)?;
            Ok((
                number(path, line, f[0], "id")?,
                Point3::new(finite(path, line, f[1], "x")?, finite(path, line, f[2], "y")?, finite(path, line, f[3], "z")?),
            ))
        })
        .collect()
}

/// One row of `obs.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationRecord {
    pub frame_id: usize,
    pub landmark_id: LandmarkId,
    pub pixel: StereoPixel,
    pub is_outlier: bool,
}

const OBS_HEADER: &str = "frame_id,landmark_id,uL,v,uR,is_outlier";

pub fn format_observations(rows: &[ObservationRecord]) -> String {
    let mut s = format!("{OBS_HEADER}\n");
    for r in rows {
        let p = &r.pixel;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.frame_id, r.landmark_id, p.u_left, p.v, p.u_right, r.is_outlier as u8);
    }
    s
}

pub fn parse_observations(path: &Path, text: &str) -> Result<Vec<ObservationRecord>, CliError> {
    csv_rows(text, OBS_HEADER)
        .map(|(line, content)| {
            let f = fields(path, line, content, Some(','), 6)?;
            let is_outlier = match f[5] {
                "0" => false,
                "1" => true,
                other => return Err(parse_error(path, line, format!("invalid is_outlier `{other}`, expected 0 or 1"))),
            };
            Ok(ObservationRecord {
                frame_id: number(path, line, f[0], "frame_id")?,
                landmark_id: number(path, line, f[1], "landmark_id")?,
                pixel: StereoPixel::new(
                    finite(path, line, f[2], "uL")?,
                    finite(path, line, f[3], "v")?,
                    finite(path, line, f[4], "uR")?,
                ),
                is_outlier,
            })
        })
        .collect()
}

pub fn format_normals(rows: &[(usize, FrameNormal)]) -> String {
    let mut s = String::from("frame_id,nx,ny,nz\n");
    for (frame, n) in rows {
        let v = n.vector();
        let _ = writeln!(s, "{frame},{},{},{}", v.x, v.y, v.z);
    }
    s
}

pub fn parse_normals(path: &Path, text: &str) -> Result<Vec<(usize, FrameNormal)>, CliError> {
    csv_rows(text, "frame_id,nx,ny,nz")
        .map(|(line, content)| {
            let f = fields(path, line, content, Some(','), 4)?;
            let frame = number(path, line, f[0], "frame_id")?;
            let v = Vector3::new(finite(path, line, f[1], "nx")?, finite(path, line, f[2], "ny")?, finite(path, line, f[3], "nz")?);
            let n = FrameNormal::new(v).map_err(|e| parse_error(path, line, e.to_string()))?;
            Ok((frame, n))
        })
        .collect()
}

/// A dataset directory in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    /// Ground truth, one record per frame; frame `i` is line `i`.
    pub ground_truth: Vec<TrajectoryRecord>,
    pub landmarks: Vec<(LandmarkId, Point3)>,
    pub observations: Vec<ObservationRecord>,
    pub normals: Vec<(usize, FrameNormal)>,
}

impl Dataset {
    pub fn from_sequence(seq: &SimulatedSequence) -> Self {
        let ground_truth = records_from_world_to_camera(seq.frames.iter().map(|f| f.timestamp).zip(&seq.ground_truth));
        let observations = seq
            .frames
            .iter()
            .flat_map(|f| {
                f.observations.iter().map(move |o| ObservationRecord {
                    frame_id: f.frame_id,
                    landmark_id: o.landmark_id,
                    pixel: o.pixel,
                    is_outlier: o.is_outlier,
                })
            })
            .collect();
        Self {
            intrinsics: seq.intrinsics,
            ground_truth,
            landmarks: seq.landmarks.iter().copied().enumerate().collect(),
            observations,
            normals: seq.frames.iter().filter_map(|f| f.normal.map(|n| (f.frame_id, n))).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_file(&dir.join(INTRINSICS_FILE), &format_intrinsics(&self.intrinsics))?;
        write_file(&dir.join(GROUND_TRUTH_FILE), &format_trajectory(&self.ground_truth))?;
        write_file(&dir.join(LANDMARKS_FILE), &format_landmarks(&self.landmarks))?;
        write_file(&dir.join(OBSERVATIONS_FILE), &format_observations(&self.observations))?;
        write_file(&dir.join(NORMALS_FILE), &format_normals(&self.normals))
    }

    /// Reads and cross-checks every dataset file.
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = |name: &str| dir.join(name);
        let intrinsics = parse_intrinsics(&path(INTRINSICS_FILE), &read(&path(INTRINSICS_FILE))?)?;
        let ground_truth = read_trajectory(&path(GROUND_TRUTH_FILE))?;
        let landmarks = parse_landmarks(&path(LANDMARKS_FILE), &read(&path(LANDMARKS_FILE))?)?;
        let obs_path = path(OBSERVATIONS_FILE);
        let observations = parse_observations(&obs_path, &read(&obs_path)?)?;
        let normals_path = path(NORMALS_FILE);
        let normals = parse_normals(&normals_path, &read(&normals_path)?)?;
        let frames = ground_truth.len();
        if let Some(o) = observations.iter().find(|o| o.frame_id >= frames) {
            return Err(CliError::Data(format!(
                "{}: frame {} has no ground-truth record ({frames} frames)",
                obs_path.display(),
                o.frame_id
            )));
        }
        if observations.windows(2).any(|w| w[1].frame_id < w[0].frame_id) {
            return Err(CliError::Data(format!("{}: rows must be ordered by frame_id", obs_path.display())));
        }
        if let Some((f, _)) = normals.iter().find(|(f, _)| *f >= frames) {
            return Err(CliError::Data(format!("{}: frame {f} has no ground-truth record", normals_path.display())));
        }
        Ok(Self { intrinsics, ground_truth, landmarks, observations, normals })
    }

    /// The estimator input: one frame per ground-truth record, stamped with
    /// its timestamp, observations weighted `1/pixel_sigma²`.
    pub fn to_stream(&self, pixel_sigma: f64) -> ObservationStream {
        let weight = 1.0 / (pixel_sigma * pixel_sigma);
        let mut frames: Vec<FrameInput> = self
            .ground_truth
            .iter()
            .enumerate()
            .map(|(i, r)| FrameInput { frame_id: i, timestamp: r.timestamp, observations: Vec::new(), normal: None })
            .collect();
        for o in &self.observations {
            frames[o.frame_id].observations.push(StereoObservation::new(o.frame_id, o.landmark_id, o.pixel, weight));
        }
        for (f, n) in &self.normals {
            frames[*f].normal = Some(*n);
        }
        ObservationStream { intrinsics: self.intrinsics, frames }
    }
}
