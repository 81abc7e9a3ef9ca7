//! The two robust least-squares problems: pose-only tracking and local bundle
//! adjustment. Both whiten residuals by `√weight`, apply Huber to the norm of
//! the whitened residual and feed IRLS-weighted normal equations to the
//! damped driver.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};

use super::solver::{CostBreakdown, DampedProblem};
use crate::factors::{
    huber, normal_jacobians, normal_residual, reprojection_jacobians, FrameNormal, GlobalNormal, RobustLossConfig,
    TangentBasis,
};
use crate::geometry::{project, Intrinsics, Point3, PoseSE3, Twist};

/// Whitened residual norm charged to an observation whose point falls
/// behind the camera.
const BEHIND_CAMERA_RESIDUAL: f64 = 1e3;

pub(crate) fn reprojection_error(k: &Intrinsics, pose: &PoseSE3, p: &Point3, pixel: &Vector3<f64>) -> Option<Vector3<f64>> {
    project(k, &pose.transform_point(p)).ok().map(|u| u.to_vector() - pixel)
}

/// Robust cost of one stereo observation.
pub(crate) fn reprojection_cost(k: &Intrinsics, pose: &PoseSE3, p: &Point3, pixel: &Vector3<f64>, weight: f64, delta: f64) -> f64 {
    match reprojection_error(k, pose, p, pixel) {
        Some(e) => huber(weight.sqrt() * e.norm(), delta).cost,
        None => huber(BEHIND_CAMERA_RESIDUAL, delta).cost,
    }
}

/// A frame normal with its precomputed tangent basis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormalMeasurement {
    pub basis: TangentBasis,
    pub normal: FrameNormal,
}

fn normal_cost(m: &NormalMeasurement, rotation: &Matrix3<f64>, n_w: &GlobalNormal, loss: &RobustLossConfig) -> (Vector2<f64>, f64, f64) {
    let e = normal_residual(&m.basis, rotation, n_w, &m.normal);
    let h = huber(loss.lambda.sqrt() * e.norm(), loss.delta_normal);
    (e, h.cost, h.weight)
}

pub(crate) struct PoseOnlyProblem<'a> {
    k: Intrinsics,
    points: &'a [Point3],
    pixels: &'a [Vector3<f64>],
    weights: &'a [f64],
    normal: Option<(NormalMeasurement, GlobalNormal)>,
    loss: RobustLossConfig,
    pub pose: PoseSE3,
    saved: PoseSE3,
    hessian: Matrix6<f64>,
    gradient: Vector6<f64>,
    step: Vector6<f64>,
}

impl<'a> PoseOnlyProblem<'a> {
    pub fn new(
        k: Intrinsics,
        points: &'a [Point3],
        pixels: &'a [Vector3<f64>],
        weights: &'a [f64],
        normal: Option<(NormalMeasurement, GlobalNormal)>,
        loss: RobustLossConfig,
        pose: PoseSE3,
    ) -> Self {
        Self {
            k,
            points,
            pixels,
            weights,
            normal,
            loss,
            pose,
            saved: pose,
            hessian: Matrix6::zeros(),
            gradient: Vector6::zeros(),
            step: Vector6::zeros(),
        }
    }
}

impl DampedProblem for PoseOnlyProblem<'_> {
    fn cost(&self) -> CostBreakdown {
        let mut c = CostBreakdown::default();
        for ((p, u), w) in self.points.iter().zip(self.pixels).zip(self.weights) {
            c.reprojection += reprojection_cost(&self.k, &self.pose, p, u, *w, self.loss.delta_repro);
        }
        if let Some((m, nw)) = &self.normal {
            c.normal = normal_cost(m, &self.pose.rotation, nw, &self.loss).1;
            c.normal_factors = 1;
        }
        c
    }

    fn linearize(&mut self) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for ((p, u), &w) in self.points.iter().zip(self.pixels).zip(self.weights) {
            let Some(e) = reprojection_error(&self.k, &self.pose, p, u) else {
                continue;
            };
            let Ok((jp, _)) = reprojection_jacobians(&self.k, &self.pose, p) else {
                continue;
            };
            let s = w * huber(w.sqrt() * e.norm(), self.loss.delta_repro).weight;
            let jt = jp.transpose();
            h += s * jt * jp;
            g += s * jt * e;
        }
        if let Some((m, nw)) = &self.normal {
            let (e, _, irls) = normal_cost(m, &self.pose.rotation, nw, &self.loss);
            let (j_phi, _) = normal_jacobians(&m.basis, &self.pose.rotation, nw);
            let s = self.loss.lambda * irls;
            let mut block = h.fixed_view_mut::<3, 3>(3, 3);
            block += s * j_phi.transpose() * j_phi;
            let mut gr = g.fixed_rows_mut::<3>(3);
            gr += s * j_phi.transpose() * e;
        }
        self.hessian = h;
        self.gradient = g;
    }

    fn solve_step(&mut self, damping: f64) -> Option<f64> {
        let a = self.hessian + Matrix6::identity() * damping;
        let step = a.cholesky()?.solve(&(-self.gradient));
        if !step.iter().all(|x| x.is_finite()) {
            return None;
        }
        self.step = step;
        Some(step.norm())
    }

    fn apply_step(&mut self) {
        self.saved = self.pose;
        self.pose = self.pose.apply_update(&Twist(self.step));
    }

    fn revert_step(&mut self) {
        self.pose = self.saved;
    }
}

/// One stereo observation inside a BA window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WindowObservation {
    pub keyframe: usize,
    pub landmark: usize,
    pub pixel: Vector3<f64>,
    pub weight: f64,
}

/// Local BA over `free` keyframe poses (the first `free_count` entries of
/// `poses`), all `points`, and optionally the world normal. Landmarks are
/// eliminated with a Schur complement; the reduced camera system is solved
/// densely.
pub(crate) struct BundleProblem {
    k: Intrinsics,
    loss: RobustLossConfig,
    pub poses: Vec<PoseSE3>,
    free_count: usize,
    pub points: Vec<Point3>,
    observations: Vec<WindowObservation>,
    by_landmark: Vec<Vec<usize>>,
    normals: Vec<Option<NormalMeasurement>>,
    pub global_normal: Option<GlobalNormal>,
    normal_free: bool,

    // linearization
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    hpl: Vec<Matrix6x3<f64>>,

    // step
    dp: DVector<f64>,
    dl: Vec<Vector3<f64>>,
    saved_poses: Vec<PoseSE3>,
    saved_points: Vec<Point3>,
    saved_normal: Option<GlobalNormal>,
}

impl BundleProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: Intrinsics,
        loss: RobustLossConfig,
        poses: Vec<PoseSE3>,
        free_count: usize,
        points: Vec<Point3>,
        observations: Vec<WindowObservation>,
        normals: Vec<Option<NormalMeasurement>>,
        global_normal: Option<GlobalNormal>,
        normal_free: bool,
    ) -> Self {
        let mut by_landmark = vec![Vec::new(); points.len()];
        for (i, o) in observations.iter().enumerate() {
            by_landmark[o.landmark].push(i);
        }
        let use_normals = loss.lambda > 0.0 && global_normal.is_some();
        let normal_free = normal_free && use_normals;
        let dim = 6 * free_count + if normal_free { 3 } else { 0 };
        let n_obs = observations.len();
        let n_pts = points.len();
        Self {
            k,
            loss,
            saved_poses: poses.clone(),
            poses,
            free_count,
            saved_points: points.clone(),
            points,
            observations,
            by_landmark,
            normals,
            saved_normal: global_normal,
            global_normal,
            normal_free,
            hpp: DMatrix::zeros(dim, dim),
            gp: DVector::zeros(dim),
            hll: vec![Matrix3::zeros(); n_pts],
            gl: vec![Vector3::zeros(); n_pts],
            hpl: vec![Matrix6x3::zeros(); n_obs],
            dp: DVector::zeros(dim),
            dl: vec![Vector3::zeros(); n_pts],
        }
    }

    fn uses_normals(&self) -> bool {
        self.loss.lambda > 0.0 && self.global_normal.is_some()
    }

    fn normal_offset(&self) -> usize {
        6 * self.free_count
    }
}

impl DampedProblem for BundleProblem {
    fn cost(&self) -> CostBreakdown {
        let mut c = CostBreakdown::default();
        for o in &self.observations {
            c.reprojection += reprojection_cost(
                &self.k,
                &self.poses[o.keyframe],
                &self.points[o.landmark],
                &o.pixel,
                o.weight,
                self.loss.delta_repro,
            );
        }
        if self.uses_normals() {
            let nw = self.global_normal.as_ref().expect("checked");
            for (pose, m) in self.poses.iter().zip(&self.normals) {
                if let Some(m) = m {
                    c.normal += normal_cost(m, &pose.rotation, nw, &self.loss).1;
                    c.normal_factors += 1;
                }
            }
        }
        c
    }

    fn linearize(&mut self) {
        self.hpp.fill(0.0);
        self.gp.fill(0.0);
        for (h, g) in self.hll.iter_mut().zip(self.gl.iter_mut()) {
            *h = Matrix3::zeros();
            *g = Vector3::zeros();
        }
        for (idx, o) in self.observations.iter().enumerate() {
            self.hpl[idx] = Matrix6x3::zeros();
            let pose = &self.poses[o.keyframe];
            let p = &self.points[o.landmark];
            let Some(e) = reprojection_error(&self.k, pose, p, &o.pixel) else {
                continue;
            };
            let Ok((jp, jl)) = reprojection_jacobians(&self.k, pose, p) else {
                continue;
            };
            let s = o.weight * huber(o.weight.sqrt() * e.norm(), self.loss.delta_repro).weight;
            let jlt = jl.transpose();
            self.hll[o.landmark] += s * jlt * jl;
            self.gl[o.landmark] += s * jlt * e;
            if o.keyframe < self.free_count {
                let jpt: Matrix6x3<f64> = jp.transpose();
                let off = 6 * o.keyframe;
                let mut block = self.hpp.fixed_view_mut::<6, 6>(off, off);
                block += s * jpt * jp;
                let mut gb = self.gp.fixed_rows_mut::<6>(off);
                gb += s * jpt * e;
                self.hpl[idx] = s * jpt * jl;
            }
        }
        if self.uses_normals() {
            let nw = self.global_normal.expect("checked");
            let no = self.normal_offset();
            for (i, m) in self.normals.iter().enumerate() {
                let Some(m) = m else { continue };
                let rotation = self.poses[i].rotation;
                let (e, _, irls) = normal_cost(m, &rotation, &nw, &self.loss);
                let (j_phi, j_nw) = normal_jacobians(&m.basis, &rotation, &nw);
                let s = self.loss.lambda * irls;
                let free_pose = i < self.free_count;
                if free_pose {
                    let off = 6 * i + 3;
                    let mut b = self.hpp.fixed_view_mut::<3, 3>(off, off);
                    b += s * j_phi.transpose() * j_phi;
                    let mut gb = self.gp.fixed_rows_mut::<3>(off);
                    gb += s * j_phi.transpose() * e;
                }
                if self.normal_free {
                    let mut b = self.hpp.fixed_view_mut::<3, 3>(no, no);
                    b += s * j_nw.transpose() * j_nw;
                    let mut gb = self.gp.fixed_rows_mut::<3>(no);
                    gb += s * j_nw.transpose() * e;
                    if free_pose {
                        let off = 6 * i + 3;
                        let cross = s * j_phi.transpose() * j_nw;
                        let mut b = self.hpp.fixed_view_mut::<3, 3>(off, no);
                        b += cross;
                        let mut b = self.hpp.fixed_view_mut::<3, 3>(no, off);
                        b += cross.transpose();
                    }
                }
            }
        }
    }

    fn solve_step(&mut self, damping: f64) -> Option<f64> {
        let dim = self.hpp.nrows();
        let mut schur = self.hpp.clone();
        for i in 0..dim {
            schur[(i, i)] += damping;
        }
        let mut rhs = -self.gp.clone();
        let mut c_inv = vec![Matrix3::zeros(); self.points.len()];
        for (l, obs) in self.by_landmark.iter().enumerate() {
            let c = self.hll[l] + Matrix3::identity() * damping;
            let inv = c.cholesky()?.inverse();
            c_inv[l] = inv;
            let free: Vec<usize> = obs.iter().copied().filter(|&o| self.observations[o].keyframe < self.free_count).collect();
            let weighted: Vec<Matrix6x3<f64>> = free.iter().map(|&o| self.hpl[o] * inv).collect();
            for (a, &oa) in free.iter().enumerate() {
                let ia = 6 * self.observations[oa].keyframe;
                let mut r = rhs.fixed_rows_mut::<6>(ia);
                r += weighted[a] * self.gl[l];
                for &ob in &free[a..] {
                    let ib = 6 * self.observations[ob].keyframe;
                    let block: Matrix6<f64> = weighted[a] * self.hpl[ob].transpose();
                    let mut s = schur.fixed_view_mut::<6, 6>(ia, ib);
                    s -= block;
                    if ia != ib {
                        let mut s = schur.fixed_view_mut::<6, 6>(ib, ia);
                        s -= block.transpose();
                    }
                }
            }
        }
        let dp = if dim > 0 { schur.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut norm2 = dp.norm_squared();
        for (l, obs) in self.by_landmark.iter().enumerate() {
            let mut r = -self.gl[l];
            for &o in obs {
                let kf = self.observations[o].keyframe;
                if kf < self.free_count {
                    let x = dp.fixed_rows::<6>(6 * kf);
                    r -= self.hpl[o].transpose() * x;
                }
            }
            self.dl[l] = c_inv[l] * r;
            norm2 += self.dl[l].norm_squared();
        }
        if !norm2.is_finite() {
            return None;
        }
        self.dp = dp;
        Some(norm2.sqrt())
    }

    fn apply_step(&mut self) {
        self.saved_poses.clone_from(&self.poses);
        self.saved_points.clone_from(&self.points);
        self.saved_normal = self.global_normal;
        for i in 0..self.free_count {
            let xi: Vector6<f64> = self.dp.fixed_rows::<6>(6 * i).into_owned();
            self.poses[i] = self.poses[i].apply_update(&Twist(xi));
        }
        for (p, d) in self.points.iter_mut().zip(&self.dl) {
            *p += d;
        }
        if self.normal_free {
            let d: Vector3<f64> = self.dp.fixed_rows::<3>(self.normal_offset()).into_owned();
            let moved = self.global_normal.expect("free normal exists").vector() + d;
            // the residual only sees the direction
            if let Ok(n) = GlobalNormal::new(moved.normalize()) {
                self.global_normal = Some(n);
            }
        }
    }

    fn revert_step(&mut self) {
        self.poses.clone_from(&self.saved_poses);
        self.points.clone_from(&self.saved_points);
        self.global_normal = self.saved_normal;
    }
}
