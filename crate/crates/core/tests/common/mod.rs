//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use normal_vo::estimator::{insert_keyframe, local_bundle_adjustment, run_sequence, track_frame, KeyframeInput, MapState, SolverConfig};
use normal_vo::evaluation::{align, ate, rde, AlignmentMode, Trajectory};
use normal_vo::factors::{
    make_tangent_basis, normal_jacobians, normal_residual, reprojection_jacobians, reprojection_residual, FrameNormal,
    GlobalNormal,
};
use normal_vo::geometry::{project, triangulate, Intrinsics, Point3, PoseSE3, Twist};
use normal_vo::simulator::{simulate, SceneConfig, SimulatedSequence, TrajectoryShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const JACOBIAN_REL_TOL: f64 = 1e-5;
pub const JACOBIAN_CASES: usize = 1000;
pub const SWEEP_CASES: usize = 10_000;
pub const ROUND_TRIP_TOL: f64 = 1e-9;
pub const TANGENT_TOL: f64 = 1e-12;
pub const BASIS_TOL: f64 = 1e-9;
pub const ALIGNMENT_ORACLE_TOL: f64 = 1e-6;
pub const ATE_INVARIANCE_TOL: f64 = 1e-9;
pub const ZERO_NOISE_ATE_TOL: f64 = 1e-6;
pub const ZERO_NOISE_SECONDS: f64 = 30.0;
pub const OUTLIER_RECALL: f64 = 0.95;
pub const INLIER_LOSS: f64 = 0.01;
pub const TRACKING_TARGET_MS: f64 = 30.0;
pub const TRACKING_LIMIT_MS: f64 = 100.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn intrinsics() -> Intrinsics {
    SceneConfig::default().intrinsics
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Twist with rotation angle below `max_angle` and translation in a 4 m cube.
pub fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
    let rho = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let phi = unit_vector(rng) * rng.random_range(0.0..max_angle);
    Twist::new(rho, phi)
}

/// Camera-frame point inside the image at depth 1–30 m.
pub fn random_visible_point(rng: &mut ChaCha8Rng, k: &Intrinsics) -> Point3 {
    let z = rng.random_range(1.0..30.0);
    let u = rng.random_range(0.0..824.0);
    let v = rng.random_range(0.0..449.0);
    Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-12)
}

/// Relative errors of the pose and landmark reprojection Jacobians against
/// central differences.
pub fn reprojection_fd(k: &Intrinsics, pose: &PoseSE3, p: &Point3) -> (f64, f64) {
    let obs = project(k, &pose.transform_point(p)).unwrap();
    let r = |pose: &PoseSE3, p: &Point3| reprojection_residual(k, pose, p, &obs).unwrap();
    let (jp, jl) = reprojection_jacobians(k, pose, p).unwrap();
    let mut np = DMatrix::zeros(3, 6);
    for i in 0..6 {
        let mut e = [0.0; 6];
        e[i] = FD_STEP;
        let plus = pose.apply_update(&Twist::from_slice(&e));
        e[i] = -FD_STEP;
        let minus = pose.apply_update(&Twist::from_slice(&e));
        np.set_column(i, &((r(&plus, p) - r(&minus, p)) / (2.0 * FD_STEP)));
    }
    let mut nl = DMatrix::zeros(3, 3);
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = FD_STEP;
        nl.set_column(i, &((r(pose, &(p + d)) - r(pose, &(p - d))) / (2.0 * FD_STEP)));
    }
    let jp = DMatrix::from_column_slice(3, 6, jp.as_slice());
    let jl = DMatrix::from_column_slice(3, 3, jl.as_slice());
    (rel_err(&jp, &np), rel_err(&jl, &nl))
}

/// Relative errors of the rotation and world-normal Jacobians of the normal
/// residual against central differences.
pub fn normal_fd(rotation: &Matrix3<f64>, n_w: &Vector3<f64>, n_k: &FrameNormal) -> (f64, f64) {
    let basis = make_tangent_basis(n_k);
    let gn = GlobalNormal::new(*n_w).unwrap();
    let r = |rot: &Matrix3<f64>, n: &Vector3<f64>| normal_residual(&basis, rot, &GlobalNormal::new(*n).unwrap(), n_k);
    let (jphi, jnw) = normal_jacobians(&basis, rotation, &gn);
    let mut nphi = DMatrix::zeros(2, 3);
    let mut nnw = DMatrix::zeros(2, 3);
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = FD_STEP;
        let rp = PoseSE3::exp(&Twist::new(Vector3::zeros(), d)).rotation * rotation;
        let rm = PoseSE3::exp(&Twist::new(Vector3::zeros(), -d)).rotation * rotation;
        nphi.set_column(i, &((r(&rp, n_w) - r(&rm, n_w)) / (2.0 * FD_STEP)));
        nnw.set_column(i, &((r(rotation, &(n_w + d)) - r(rotation, &(n_w - d))) / (2.0 * FD_STEP)));
    }
    let jphi = DMatrix::from_column_slice(2, 3, jphi.as_slice());
    let jnw = DMatrix::from_column_slice(2, 3, jnw.as_slice());
    (rel_err(&jphi, &nphi), rel_err(&jnw, &nnw))
}

/// Random normal-factor configuration: a rotation, an unnormalized world
/// normal and a frame normal near its rotated direction.
pub fn random_normal_case(rng: &mut ChaCha8Rng) -> (Matrix3<f64>, Vector3<f64>, FrameNormal) {
    let rotation = PoseSE3::exp(&random_twist(rng, 3.0)).rotation;
    let n_w = unit_vector(rng) * rng.random_range(0.5..2.0);
    let noise = unit_vector(rng) * rng.random_range(0.0..0.3);
    let n_k = FrameNormal::new_unoriented(rotation * n_w.normalize() + noise).unwrap();
    (rotation, n_w, n_k)
}

/// Worst relative Jacobian errors `(reprojection, normal)` over `cases`
/// random configurations of each factor.
pub fn jacobian_suite(cases: usize, seed: u64) -> (f64, f64) {
    let k = intrinsics();
    let mut rng = rng(seed);
    let mut worst_repro: f64 = 0.0;
    for _ in 0..cases {
        let pose = PoseSE3::exp(&random_twist(&mut rng, 1.0));
        let pc = random_visible_point(&mut rng, &k);
        let (a, b) = reprojection_fd(&k, &pose, &pose.inverse().transform_point(&pc));
        worst_repro = worst_repro.max(a).max(b);
    }
    let mut worst_normal: f64 = 0.0;
    for _ in 0..cases {
        let (r, nw, nk) = random_normal_case(&mut rng);
        let (a, b) = normal_fd(&r, &nw, &nk);
        worst_normal = worst_normal.max(a).max(b);
    }
    (worst_repro, worst_normal)
}

/// Worst exp/log round trip over twists with `‖φ‖ ≤ 3`, and worst
/// project/triangulate round trip (m).
pub fn geometry_sweeps(cases: usize, seed: u64) -> (f64, f64) {
    let k = intrinsics();
    let mut rng = rng(seed);
    let mut worst_log: f64 = 0.0;
    let mut worst_tri: f64 = 0.0;
    for _ in 0..cases {
        let xi = random_twist(&mut rng, 3.0);
        worst_log = worst_log.max((PoseSE3::exp(&xi).log().0 - xi.0).amax());
        let pc = random_visible_point(&mut rng, &k);
        let back = triangulate(&k, &project(&k, &pc).unwrap(), 0.0).unwrap();
        worst_tri = worst_tri.max((back - pc).norm());
    }
    (worst_log, worst_tri)
}

/// Worst deviations of the tangent-plane residual properties: scale
/// invariance in `n_w`, annihilation of the `n_k` component, and basis
/// orthonormality.
pub fn tangential_sweeps(cases: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = rng(seed);
    let (mut scale, mut annihilate, mut ortho): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..cases {
        let (r, nw, nk) = random_normal_case(&mut rng);
        let basis = make_tangent_basis(&nk);
        let s = rng.random_range(0.01..100.0);
        let a = normal_residual(&basis, &r, &GlobalNormal::new(nw).unwrap(), &nk);
        let b = normal_residual(&basis, &r, &GlobalNormal::new(nw * s).unwrap(), &nk);
        scale = scale.max((a - b).amax());
        annihilate = annihilate.max((basis.matrix() * nk.vector()).amax());
        let m = basis.matrix();
        let gram = m * m.transpose();
        ortho = ortho.max((gram - nalgebra::Matrix2::identity()).amax());
    }
    (scale, annihilate, ortho)
}

/// `(fraction of labeled outliers removed, fraction of inliers removed)`
/// after one local BA with rejection over ten keyframes placed at their
/// ground-truth poses. Observations of landmarks seen by a single keyframe
/// carry no redundancy and are left out of both fractions.
pub fn outlier_round(seed: u64) -> (f64, f64, usize) {
    let scene = SceneConfig { shape: TrajectoryShape::Straight, frame_count: 50, seed, ..SceneConfig::default() };
    let seq = simulate(&scene).unwrap();
    let stream = seq.to_stream(1.0);
    let cfg = SolverConfig { max_local_keyframes: 20, ..SolverConfig::default() };
    let mut map = MapState::new(cfg.normal_init_window);
    let mut last = 0;
    for frame in (0..50).step_by(5) {
        let f = &stream.frames[frame];
        let input = KeyframeInput {
            frame_id: frame,
            pose: seq.ground_truth[frame],
            observations: &f.observations,
            inliers: None,
            normal: f.normal,
        };
        last = insert_keyframe(&seq.intrinsics, &mut map, input, &cfg);
    }
    let labels: BTreeMap<(usize, usize), bool> = seq
        .frames
        .iter()
        .flat_map(|f| f.observations.iter().map(move |o| ((f.frame_id, o.landmark_id), o.is_outlier)))
        .collect();
    let label = |map: &MapState, kf: usize, lm: usize| labels[&(map.keyframes[&kf].frame_id, lm)];
    let redundant: Vec<(usize, usize, bool)> = map
        .observations
        .keys()
        .filter(|(_, lm)| map.landmarks[lm].observers.len() > 1)
        .map(|&(kf, lm)| (kf, lm, label(&map, kf, lm)))
        .collect();
    let outliers = redundant.iter().filter(|x| x.2).count();
    let inliers = redundant.len() - outliers;
    let before = map.clone();
    let ba = local_bundle_adjustment(&seq.intrinsics, &mut map, last, &cfg).unwrap();
    let removed: std::collections::BTreeSet<(usize, usize)> = ba.rejected.removed.iter().copied().collect();
    let removed_outliers = redundant.iter().filter(|x| x.2 && removed.contains(&(x.0, x.1))).count();
    let removed_inliers = redundant.iter().filter(|x| !x.2 && removed.contains(&(x.0, x.1))).count();
    assert_eq!(before.keyframes[&0].pose, map.keyframes[&0].pose);
    (removed_outliers as f64 / outliers as f64, removed_inliers as f64 / inliers as f64, outliers)
}

fn positions_trajectory(positions: &[Vector3<f64>]) -> Trajectory {
    Trajectory::new(positions.iter().enumerate().map(|(i, p)| (i as f64, PoseSE3::from_translation(*p))).collect()).unwrap()
}

fn alignment_cost(est: &Trajectory, gt: &Trajectory, r: &Matrix3<f64>) -> f64 {
    let n = est.len() as f64;
    let cg = gt.poses().iter().map(|p| p.translation).sum::<Vector3<f64>>() / n;
    let ce = est.poses().iter().map(|p| p.translation).sum::<Vector3<f64>>() / n;
    let t = ce - r * cg;
    est.poses().iter().zip(gt.poses()).map(|(e, g)| (e.translation - (r * g.translation + t)).norm_squared()).sum()
}

/// Rotation minimizing the alignment cost by grid search over rotation
/// vectors followed by compass-search refinement.
pub fn brute_force_rotation(est: &Trajectory, gt: &Trajectory) -> Matrix3<f64> {
    let to_rot = |w: &Vector3<f64>| PoseSE3::exp(&Twist::new(Vector3::zeros(), *w)).rotation;
    let pi = std::f64::consts::PI;
    let steps = 12;
    let mut best = Vector3::zeros();
    let mut best_cost = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            for l in 0..=steps {
                let w = Vector3::new(i as f64, j as f64, l as f64) * (2.0 * pi / steps as f64) - Vector3::repeat(pi);
                if w.norm() > pi + 0.3 {
                    continue;
                }
                let c = alignment_cost(est, gt, &to_rot(&w));
                if c < best_cost {
                    best_cost = c;
                    best = w;
                }
            }
        }
    }
    let mut h = 0.3;
    while h > 1e-11 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut w = best;
                w[axis] += sign * h;
                let c = alignment_cost(est, gt, &to_rot(&w));
                if c < best_cost {
                    best_cost = c;
                    best = w;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    to_rot(&best)
}

/// Worst entrywise difference between the closed-form alignment rotation and
/// the brute-force minimizer over random trajectories of 4–10 poses.
pub fn alignment_oracle(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(4..=10);
        let gt: Vec<Vector3<f64>> =
            (0..n).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0))).collect();
        let g = PoseSE3::exp(&random_twist(&mut rng, 3.0));
        let est: Vec<Vector3<f64>> = gt
            .iter()
            .map(|p| g.transform_point(p) + Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let (est, gt) = (positions_trajectory(&est), positions_trajectory(&gt));
        let s = align(&est, &gt, AlignmentMode::Full).unwrap();
        worst = worst.max((s.rotation - brute_force_rotation(&est, &gt)).amax());
    }
    worst
}

/// Per-frame RDE of the collinear case: estimate x = (0, 1, 2), ground truth
/// x = (0, 1.1, 2.2), step 1.
pub fn rde_collinear() -> Vec<f64> {
    let est = positions_trajectory(&[Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0]);
    let gt = positions_trajectory(&[Vector3::zeros(), Vector3::x() * 1.1, Vector3::x() * 2.2]);
    rde(&est, &gt, 1).unwrap().errors
}

/// Worst change of any per-frame ATE when the estimate is moved by random
/// rigid transforms.
pub fn ate_invariance(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let records: Vec<(f64, PoseSE3)> =
        (0..40).map(|i| (i as f64 * 0.1, PoseSE3::exp(&random_twist(&mut rng, 0.5)))).collect();
    let gt = Trajectory::new(records.clone()).unwrap();
    let est = Trajectory::new(
        records.iter().map(|(t, p)| (*t, p.apply_update(&Twist(random_twist(&mut rng, 0.05).0 * 0.05)))).collect(),
    )
    .unwrap();
    let base = ate(&est, &gt, &align(&est, &gt, AlignmentMode::Full).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let g = PoseSE3::exp(&random_twist(&mut rng, 3.0));
        let moved = est.transformed(&g);
        let r = ate(&moved, &gt, &align(&moved, &gt, AlignmentMode::Full).unwrap()).unwrap();
        for (a, b) in base.errors.iter().zip(&r.errors) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((base.rmse - r.rmse).abs());
    }
    worst
}

/// Noiseless, outlier-free default scene.
pub fn noiseless_sequence() -> SimulatedSequence {
    simulate(&SceneConfig::default().noiseless()).unwrap()
}

/// `(ATE RMSE, seconds)` of the full pipeline on [`noiseless_sequence`].
pub fn zero_noise_run() -> (f64, f64) {
    let seq = noiseless_sequence();
    let start = Instant::now();
    let result = run_sequence(&seq.to_stream(1.0), &SolverConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let est = Trajectory::from_world_to_camera(result.trajectory.iter().map(|(_, t, p)| (*t, *p))).unwrap();
    let gt = Trajectory::from_world_to_camera(seq.frames.iter().map(|f| f.timestamp).zip(seq.ground_truth.iter().copied())).unwrap();
    let s = align(&est, &gt, AlignmentMode::Full).unwrap();
    (ate(&est, &gt, &s).unwrap().rmse, secs)
}

/// Mean wall time (ms) of pose-only tracking with `observations`
/// observations of mapped landmarks, over `repetitions` calls.
pub fn tracking_time_ms(observations: usize, repetitions: usize) -> f64 {
    let scene = SceneConfig { shape: TrajectoryShape::Straight, frame_count: 10, ..SceneConfig::default() };
    let seq = simulate(&scene).unwrap();
    let stream = seq.to_stream(1.0);
    let cfg = SolverConfig::default();
    let mut map = MapState::new(cfg.normal_init_window);
    let f0 = &stream.frames[0];
    let input = KeyframeInput { frame_id: 0, pose: seq.ground_truth[0], observations: &f0.observations, inliers: None, normal: f0.normal };
    insert_keyframe(&seq.intrinsics, &mut map, input, &cfg);
    let frame = &stream.frames[3];
    let obs: Vec<_> =
        frame.observations.iter().filter(|o| map.landmarks.contains_key(&o.landmark_id)).take(observations).copied().collect();
    assert_eq!(obs.len(), observations, "not enough mapped observations in the test frame");
    let initial = seq.ground_truth[2];
    let start = Instant::now();
    for _ in 0..repetitions {
        let r = track_frame(&seq.intrinsics, &map, 3, &obs, frame.normal.as_ref(), initial, &cfg).unwrap();
        std::hint::black_box(r);
    }
    start.elapsed().as_secs_f64() * 1e3 / repetitions as f64
}
