//! Residuals, robust loss and analytic Jacobians for the two factor types the
//! estimator combines: stereo reprojection and tangent-plane surface normal.
//!
//! The normal factor compares the world normal prior, rotated into keyframe
//! `k`, with the normal measured in that keyframe. Only the part of the
//! difference lying in the plane orthogonal to the measured normal is kept,
//! which gives a 2-vector residual:
//!
//! ```text
//! e_k = B_k (R_k n_w/|n_w| - n_k),   B_k = [b0; b1] ∈ ℝ^{2×3}
//! ```
//!
//! `B_k` depends only on the measurement, so it is built once per keyframe.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{project, skew, GeometryError, Intrinsics, Point3, PoseSE3, StereoPixel};

/// 95% χ² quantile with 3 degrees of freedom.
pub const CHI2_3DOF_95: f64 = 7.815;
/// 95% χ² quantile with 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

pub type KeyframeId = usize;
pub type LandmarkId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FactorError {
    #[error("normal vector must be non-zero and finite")]
    DegenerateNormal,
    #[error("robust loss parameters must be positive")]
    InvalidLoss,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A stereo measurement of landmark `landmark_id` in frame `frame_id`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObservation {
    pub frame_id: usize,
    pub landmark_id: LandmarkId,
    pub pixel: StereoPixel,
    /// Inverse pixel variance (1/px²).
    pub weight: f64,
}

impl StereoObservation {
    pub fn new(frame_id: usize, landmark_id: LandmarkId, pixel: StereoPixel, weight: f64) -> Self {
        Self { frame_id, landmark_id, pixel, weight }
    }
}

/// Unit surface normal measured in a camera frame, oriented with `z < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameNormal(Vector3<f64>);

impl FrameNormal {
    /// Normalizes `n` and flips it so that its z-component is negative.
    /// Vectors already unit to rounding are kept bit for bit.
    pub fn new(n: Vector3<f64>) -> Result<Self, FactorError> {
        let norm = n.norm();
        if !(norm > 1e-12 && norm.is_finite()) {
            return Err(FactorError::DegenerateNormal);
        }
        let mut u = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON { n } else { n / norm };
        if u.z > 0.0 {
            u = -u;
        }
        Ok(Self(u))
    }

    /// Normalizes `n` without applying the sign convention.
    pub fn new_unoriented(n: Vector3<f64>) -> Result<Self, FactorError> {
        let norm = n.norm();
        if !(norm > 1e-12 && norm.is_finite()) {
            return Err(FactorError::DegenerateNormal);
        }
        Ok(Self(n / norm))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// World-frame normal prior. Stored unnormalized; used as `n_w/|n_w|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalNormal(Vector3<f64>);

impl GlobalNormal {
    pub fn new(n: Vector3<f64>) -> Result<Self, FactorError> {
        if !(n.norm() > 1e-6 && n.iter().all(|x| x.is_finite())) {
            return Err(FactorError::DegenerateNormal);
        }
        Ok(Self(n))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn unit(&self) -> Vector3<f64> {
        self.0.normalize()
    }
}

/// Orthonormal basis of the plane orthogonal to a frame normal, as rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentBasis(Matrix2x3<f64>);

impl TangentBasis {
    pub fn matrix(&self) -> &Matrix2x3<f64> {
        &self.0
    }

    pub fn b0(&self) -> Vector3<f64> {
        self.0.row(0).transpose()
    }

    pub fn b1(&self) -> Vector3<f64> {
        self.0.row(1).transpose()
    }
}

/// Builds the tangent basis of `n`: `b0 = n×v/|n×v|`, `b1 = n×b0/|n×b0|`.
///
/// The seed `v` is `x̂` unless `|n·x̂| > 0.9`, in which case it is `ŷ`.
pub fn make_tangent_basis(n: &FrameNormal) -> TangentBasis {
    let n = n.vector();
    let seed = if n.x.abs() > 0.9 { Vector3::y() } else { Vector3::x() };
    let b0 = n.cross(&seed).normalize();
    let b1 = n.cross(&b0).normalize();
    TangentBasis(Matrix2x3::from_rows(&[b0.transpose(), b1.transpose()]))
}

/// Robust-loss settings shared by tracking and bundle adjustment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLossConfig {
    /// Huber threshold on the whitened reprojection residual norm (px).
    pub delta_repro: f64,
    /// Huber threshold on the whitened normal residual norm.
    pub delta_normal: f64,
    /// Information weight of the normal factor.
    pub lambda: f64,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        Self { delta_repro: CHI2_3DOF_95.sqrt(), delta_normal: CHI2_2DOF_95.sqrt(), lambda: 1e4 }
    }
}

impl RobustLossConfig {
    /// Deltas must be positive; `lambda = 0` is allowed and disables the normal factor.
    pub fn validate(&self) -> Result<(), FactorError> {
        if self.delta_repro > 0.0 && self.delta_normal > 0.0 && self.lambda >= 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(FactorError::InvalidLoss)
        }
    }
}

/// Huber cost and IRLS weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Huber {
    pub cost: f64,
    /// `ρ'(r) / 2r`, equal to 1 in the quadratic region.
    pub weight: f64,
}

/// `ρ(r) = r²` for `|r| ≤ δ`, `2δ|r| − δ²` beyond.
pub fn huber(r: f64, delta: f64) -> Huber {
    let a = r.abs();
    if a <= delta {
        Huber { cost: r * r, weight: 1.0 }
    } else {
        Huber { cost: 2.0 * delta * a - delta * delta, weight: delta / a }
    }
}

/// `π(R p + t) − u`.
pub fn reprojection_residual(
    k: &Intrinsics,
    pose: &PoseSE3,
    p: &Point3,
    obs: &StereoPixel,
) -> Result<Vector3<f64>, GeometryError> {
    let predicted = project(k, &pose.transform_point(p))?;
    Ok(predicted.to_vector() - obs.to_vector())
}

/// Jacobians of the reprojection residual with respect to a left twist on
/// the pose (3×6, `(ρ, φ)` columns) and to the world landmark (3×3).
pub fn reprojection_jacobians(
    k: &Intrinsics,
    pose: &PoseSE3,
    p: &Point3,
) -> Result<(Matrix3x6<f64>, Matrix3<f64>), GeometryError> {
    let pc = pose.transform_point(p);
    let jpi = projection_jacobian(k, &pc)?;
    let mut jpose = Matrix3x6::zeros();
    jpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&jpi);
    jpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jpi * skew(&pc)));
    Ok((jpose, jpi * pose.rotation))
}

/// Derivative of the stereo projection with respect to the camera-frame point.
pub fn projection_jacobian(k: &Intrinsics, pc: &Point3) -> Result<Matrix3<f64>, GeometryError> {
    if !(pc.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Ok(Matrix3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
        k.fx * iz,
        0.0,
        -k.fx * (pc.x - k.baseline) * iz2,
    ))
}

pub fn normal_residual(
    basis: &TangentBasis,
    rotation: &Matrix3<f64>,
    n_w: &GlobalNormal,
    n_k: &FrameNormal,
) -> Vector2<f64> {
    basis.0 * (rotation * n_w.unit() - n_k.vector())
}

/// Jacobians of the normal residual with respect to the rotational part of a
/// left twist (2×3) and to the unnormalized world normal (2×3). The
/// translational columns are identically zero and are not returned.
pub fn normal_jacobians(
    basis: &TangentBasis,
    rotation: &Matrix3<f64>,
    n_w: &GlobalNormal,
) -> (Matrix2x3<f64>, Matrix2x3<f64>) {
    let norm = n_w.vector().norm();
    let unit = n_w.vector() / norm;
    let j_phi = -basis.0 * skew(&(rotation * unit));
    let projector = (Matrix3::identity() - unit * unit.transpose()) / norm;
    let j_nw = basis.0 * rotation * projector;
    (j_phi, j_nw)
}
