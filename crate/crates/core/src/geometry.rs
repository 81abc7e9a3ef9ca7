//! SE(3) kernel, rectified stereo camera model and triangulation.
//!
//! Poses map world points into a camera frame: `p_c = R p + t`. Increments are
//! twists `ξ = (ρ, φ)` with the translational part first and the rotational
//! part second; every Jacobian in the crate uses this column order. Updates
//! act from the left, `ξ ⊕ T = exp(ξ^) T`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// A 3D point in world or camera coordinates (meters).
pub type Point3 = Vector3<f64>;

/// Below this rotation angle `exp`/`log` switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Default minimum disparity (pixels) accepted by [`triangulate`].
pub const DEFAULT_MIN_DISPARITY: f64 = 0.5;

/// Rotation angles closer than this to π are flagged by [`PoseSE3::log_flagged`].
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("disparity {disparity} px is not above the minimum {min} px")]
    DegenerateDisparity { disparity: f64, min: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Pinhole intrinsics of a rectified stereo pair with horizontal baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, baseline };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("fx must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("fy must be positive"));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("baseline must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(())
    }
}

/// A stereo measurement: left-image pixel `(u_left, v)` plus the horizontal
/// pixel `u_right` of the same point in the right image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoPixel {
    pub u_left: f64,
    pub v: f64,
    pub u_right: f64,
}

impl StereoPixel {
    pub fn new(u_left: f64, v: f64, u_right: f64) -> Self {
        Self { u_left, v, u_right }
    }

    pub fn disparity(&self) -> f64 {
        self.u_left - self.u_right
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.u_left, self.v, self.u_right)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Stereo projection of a camera-frame point.
pub fn project(k: &Intrinsics, pc: &Point3) -> Result<StereoPixel, GeometryError> {
    if !(pc.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    let inv_z = 1.0 / pc.z;
    Ok(StereoPixel {
        u_left: k.fx * pc.x * inv_z + k.cx,
        v: k.fy * pc.y * inv_z + k.cy,
        u_right: k.fx * (pc.x - k.baseline) * inv_z + k.cx,
    })
}

/// Inverse of [`project`]: recovers the camera-frame point from a stereo pixel.
pub fn triangulate(k: &Intrinsics, obs: &StereoPixel, min_disparity: f64) -> Result<Point3, GeometryError> {
    let d = obs.disparity();
    if !(d > min_disparity) {
        return Err(GeometryError::DegenerateDisparity { disparity: d, min: min_disparity });
    }
    let z = k.fx * k.baseline / d;
    Ok(Point3::new(
        (obs.u_left - k.cx) * z / k.fx,
        (obs.v - k.cy) * z / k.fy,
        z,
    ))
}

/// Skew-symmetric matrix `[v]×` with `[v]× w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of 𝔰𝔢(3), ordered `(ρ, φ)`: translation first, rotation second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vector6::from_row_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn phi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Rodrigues rotation together with the left Jacobian `V` of SO(3).
fn so3_exp_and_v(phi: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let i = Matrix3::identity();
    if theta < SMALL_ANGLE {
        return (i + k + 0.5 * k2, i + 0.5 * k + k2 / 6.0);
    }
    let s = theta.sin();
    let half = (0.5 * theta).sin();
    // (1 - cos θ)/θ² without cancellation
    let a = 2.0 * half * half / (theta * theta);
    let b = s / theta;
    let r = i + b * k + a * k2;
    let v = i + a * k + ((theta - s) / (theta * theta * theta)) * k2;
    (r, v)
}

/// Logarithm of a rotation; the flag is set when the angle lies within
/// [`NEAR_PI_MARGIN`] of π.
fn so3_log(r: &Matrix3<f64>) -> (Vector3<f64>, bool) {
    let w = 0.5 * vee(&(r - r.transpose()));
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = w.norm();
    let theta = sin_theta.atan2(cos_theta);
    if theta < SMALL_ANGLE {
        // R ≈ I + [φ]×
        return (w, false);
    }
    let near_pi = theta > std::f64::consts::PI - NEAR_PI_MARGIN;
    if cos_theta > -0.5 {
        return (w * (theta / sin_theta), near_pi);
    }
    // Large angles: the antisymmetric part loses precision, read the axis off
    // the symmetric part R + Rᵀ = 2cosθ I + 2(1-cosθ) a aᵀ.
    let one_minus_c = 1.0 - cos_theta;
    let sym = 0.5 * (r + r.transpose());
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let imax = diag.imax();
    let mut axis = Vector3::zeros();
    axis[imax] = ((diag[imax] - cos_theta) / one_minus_c).max(0.0).sqrt();
    for j in 0..3 {
        if j != imax {
            axis[j] = sym[(imax, j)] / (one_minus_c * axis[imax]);
        }
    }
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    (axis * theta, near_pi)
}

/// `V⁻¹` for the rotation vector `phi`.
fn so3_v_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let i = Matrix3::identity();
    if theta < SMALL_ANGLE {
        return i - 0.5 * k + k2 / 12.0;
    }
    let half = 0.5 * theta;
    // 1/θ² (1 - (θ/2) cot(θ/2))
    let coeff = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    i - 0.5 * k + coeff * k2
}

/// Rigid transform mapping world points into a camera frame.
#[derive(Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl fmt::Debug for PoseSE3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.rotation;
        let t = &self.translation;
        write!(
            f,
            "PoseSE3 {{ R: [[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]], t: [{:.6}, {:.6}, {:.6}] }}",
            r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z
        )
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Orthonormality and unit determinant to within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().all(|x| x.abs() <= tol)
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn exp(xi: &Twist) -> Self {
        let (r, v) = so3_exp_and_v(&xi.phi());
        Self::new(r, v * xi.rho())
    }

    pub fn log(&self) -> Twist {
        self.log_flagged().0
    }

    /// Logarithm plus a flag raised for rotations within [`NEAR_PI_MARGIN`] of π,
    /// where the axis sign is ambiguous. The twist is still usable.
    pub fn log_flagged(&self) -> (Twist, bool) {
        let (phi, near_pi) = so3_log(&self.rotation);
        let rho = so3_v_inverse(&phi) * self.translation;
        (Twist::new(rho, phi), near_pi)
    }

    /// Left-multiplicative update `exp(ξ) · self`.
    pub fn apply_update(&self, xi: &Twist) -> Self {
        Self::exp(xi).compose(self)
    }

    /// Projects the rotation back onto SO(3).
    pub fn renormalized(&self) -> Self {
        let r = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 50, Rotation3::identity());
        Self::new(r.into_inner(), self.translation)
    }

    /// Unit quaternion `(x, y, z, w)` of the rotation.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let q = q.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    /// Builds a pose from a translation and an `(x, y, z, w)` quaternion.
    /// The quaternion is normalized; returns `None` for a zero quaternion.
    pub fn from_quaternion_xyzw(t: Vector3<f64>, q: [f64; 4]) -> Option<Self> {
        let q = Quaternion::new(q[3], q[0], q[1], q[2]);
        if !(q.norm() > 0.0) {
            return None;
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Some(Self::new(uq.to_rotation_matrix().into_inner(), t))
    }

    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        let dr = (self.rotation - other.rotation).amax();
        let dt = (self.translation - other.translation).amax();
        dr.max(dt)
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl Mul<&PoseSE3> for &PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        self.compose(rhs)
    }
}

/// Rotation of `angle` radians about `axis` (need not be normalized).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    so3_exp_and_v(&(a * angle)).0
}

/// Angle of the rotation `R` in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    so3_log(r).0.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn k() -> Intrinsics {
        Intrinsics::new(400.0, 400.0, 320.0, 240.0, 0.05).unwrap()
    }

    #[test]
    fn transform_point_cases() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(PoseSE3::identity().transform_point(&p), p);

        let rz = PoseSE3::from_rotation(rotation_about(&Vector3::z(), FRAC_PI_2));
        let q = rz.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert!((q - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        let tr = PoseSE3::from_translation(Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(tr.transform_point(&p), Point3::new(2.0, 3.0, 4.0));
    }

    #[test]
    fn project_cases() {
        let k = k();
        assert_eq!(project(&k, &Point3::new(0.0, 0.0, 2.0)).unwrap(), StereoPixel::new(320.0, 240.0, 310.0));
        assert_eq!(project(&k, &Point3::new(1.0, 1.0, 2.0)).unwrap(), StereoPixel::new(520.0, 440.0, 510.0));
        assert!(matches!(
            project(&k, &Point3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&k, &Point3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn triangulate_cases() {
        let k = k();
        let p = triangulate(&k, &StereoPixel::new(520.0, 440.0, 510.0), DEFAULT_MIN_DISPARITY).unwrap();
        assert!((p - Point3::new(1.0, 1.0, 2.0)).norm() < 1e-12);
        let p = triangulate(&k, &StereoPixel::new(320.0, 240.0, 310.0), DEFAULT_MIN_DISPARITY).unwrap();
        assert!((p - Point3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!(matches!(
            triangulate(&k, &StereoPixel::new(320.0, 240.0, 320.0), DEFAULT_MIN_DISPARITY),
            Err(GeometryError::DegenerateDisparity { .. })
        ));
        // exactly at the threshold is rejected too
        assert!(triangulate(&k, &StereoPixel::new(320.5, 240.0, 320.0), 0.5).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 400.0, 0.0, 0.0, 0.05).is_err());
        assert!(Intrinsics::new(400.0, -1.0, 0.0, 0.0, 0.05).is_err());
        assert!(Intrinsics::new(400.0, 400.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn exp_cases() {
        assert_eq!(PoseSE3::exp(&Twist::zero()), PoseSE3::identity());

        let t = PoseSE3::exp(&Twist::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::new(1.0, 0.0, 0.0));

        let r = PoseSE3::exp(&Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.rotation - expected).amax() < 1e-15);
        assert_eq!(r.translation, Vector3::zeros());
    }

    #[test]
    fn log_cases() {
        assert_eq!(PoseSE3::identity().log(), Twist::zero());

        let xi = Twist::from_slice(&[0.1, -0.2, 0.3, 0.01, 0.02, 0.03]);
        let back = PoseSE3::exp(&xi).log();
        assert!((back.0 - xi.0).amax() < 1e-9);

        let rx = PoseSE3::from_rotation(rotation_about(&Vector3::x(), PI));
        let (tw, near_pi) = rx.log_flagged();
        assert!(near_pi);
        assert!((tw.phi().norm() - PI).abs() < 1e-12);
        assert!(PoseSE3::exp(&tw).max_abs_diff(&rx) < 1e-12);
    }

    #[test]
    fn log_large_angle_branch() {
        for angle in [2.2, 2.9, 3.1, PI - 1e-5] {
            let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
            let xi = Twist::new(Vector3::new(0.4, 1.0, -2.0), axis * angle);
            let back = PoseSE3::exp(&xi).log();
            assert!((back.0 - xi.0).amax() < 1e-8, "angle {angle}: {:?}", back.0 - xi.0);
        }
    }

    #[test]
    fn small_angle_taylor_is_continuous() {
        let phi = Vector3::new(1.0, -2.0, 0.5).normalize();
        let rho = Vector3::new(1.0, 2.0, 3.0);
        for angle in [0.99e-8, 1.01e-8] {
            // first-order expansion is exact to within O(angle²)
            let w = phi * angle;
            let expected = PoseSE3::new(Matrix3::identity() + skew(&w), rho + 0.5 * w.cross(&rho));
            let got = PoseSE3::exp(&Twist::new(rho, w));
            assert!(got.max_abs_diff(&expected) < 1e-14, "angle {angle}");
        }
    }

    #[test]
    fn apply_update_cases() {
        let t = PoseSE3::exp(&Twist::from_slice(&[0.3, 0.1, -0.2, 0.2, -0.1, 0.4]));
        assert!(t.apply_update(&Twist::zero()).max_abs_diff(&t) < 1e-15);

        let moved = PoseSE3::identity().apply_update(&Twist::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(moved.translation, Vector3::new(1.0, 0.0, 0.0));

        let a = Twist::from_slice(&[0.01, 0.0, 0.02, 0.001, -0.002, 0.003]);
        let b = Twist::from_slice(&[-0.02, 0.01, 0.0, 0.002, 0.001, -0.001]);
        let stepwise = t.apply_update(&b).apply_update(&a);
        let composed = PoseSE3::exp(&a) * PoseSE3::exp(&b) * t;
        assert!(stepwise.max_abs_diff(&composed) < 1e-15);
    }

    #[test]
    fn quaternion_boundary_roundtrip() {
        let t = PoseSE3::exp(&Twist::from_slice(&[0.3, 0.1, -0.2, 0.7, -1.1, 0.4]));
        let q = t.quaternion_xyzw();
        let back = PoseSE3::from_quaternion_xyzw(t.translation, q).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-14);
        assert!(PoseSE3::from_quaternion_xyzw(t.translation, [0.0; 4]).is_none());
    }
}
