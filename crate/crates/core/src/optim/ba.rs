use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{damp, levenberg_marquardt, LeastSquares, LmConfig, OptimError};
use crate::geometry::{skew, Intrinsics, Point3, Pose};
use crate::par::*;

type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Pixel measurement of one map point in one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe_id: u64,
    pub point_id: usize,
    pub measured: Vector2<f64>,
    pub information: Matrix2<f64>,
}

impl Observation {
    pub fn new(keyframe_id: u64, point_id: usize, u: f64, v: f64) -> Self {
        Self {
            keyframe_id,
            point_id,
            measured: Vector2::new(u, v),
            information: Matrix2::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    /// Dense Cholesky below a size cutoff, Schur complement above it.
    Auto,
    Dense,
    Schur,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    /// Body-in-world keyframe poses.
    pub poses: BTreeMap<u64, Pose>,
    /// World-frame points.
    pub points: Vec<Point3>,
    pub observations: Vec<Observation>,
    pub intrinsics: Intrinsics,
    /// Body-to-camera transform.
    pub extrinsics: Pose,
    pub fixed: BTreeSet<u64>,
    /// Huber threshold on the whitened residual norm, pixels.
    pub huber: Option<f64>,
    pub solver: SolverKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaResult {
    pub poses: BTreeMap<u64, Pose>,
    pub points: Vec<Point3>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub costs: Vec<f64>,
    pub iterations: usize,
}

/// Residual `z - proj(E T^-1 X)` and its Jacobians with respect to a right
/// perturbation of `pose` and an additive perturbation of `point`.
pub fn reprojection_jacobians(
    pose: &Pose,
    point: &Point3,
    measured: &Vector2<f64>,
    k: &Intrinsics,
    extrinsics: &Pose,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let pb = pose.inverse().apply(point);
    let pc = extrinsics.apply(&pb);
    if pc.z <= 1e-9 {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let predicted = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
    let dproj = Matrix2x3::new(
        k.fx / z, 0.0, -k.fx * x / (z * z),
        0.0, k.fy / z, -k.fy * y / (z * z),
    );
    let re = extrinsics.rotation;
    let mut dpb_dxi = SMatrix::<f64, 3, 6>::zeros();
    dpb_dxi.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    dpb_dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&pb.coords));
    let j_pose = -(dproj * re * dpb_dxi);
    let j_point = -(dproj * re * pose.rotation.transpose());
    Some((measured - predicted, j_pose, j_point))
}

fn huber_cost(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => 2.0 * d * s.sqrt() - d * d,
        _ => s,
    }
}

fn huber_weight(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => d / s.sqrt(),
        _ => 1.0,
    }
}

#[derive(Clone)]
struct BaState {
    poses: BTreeMap<u64, Pose>,
    points: Vec<Point3>,
}

struct Linear {
    /// Diagonal pose blocks (each observation touches a single pose).
    b: Vec<Matrix6<f64>>,
    c: Vec<Matrix3<f64>>,
    e: HashMap<(usize, usize), Matrix6x3<f64>>,
    g_pose: Vec<Vector6<f64>>,
    g_point: Vec<Vector3<f64>>,
    /// Points to free poses observing them.
    observers: Vec<Vec<usize>>,
}

struct BaSolver<'a> {
    prob: &'a BaProblem,
    free: Vec<u64>,
    free_index: HashMap<u64, usize>,
    use_schur: bool,
}

/// Total robustified reprojection cost `sum rho(e^T Omega e)` of a problem
/// at its current estimate.
pub fn reprojection_cost(prob: &BaProblem) -> Result<f64, OptimError> {
    let s = BaSolver::new(prob)?;
    s.cost(&BaState {
        poses: prob.poses.clone(),
        points: prob.points.clone(),
    })
}

impl<'a> BaSolver<'a> {
    fn new(prob: &'a BaProblem) -> Result<Self, OptimError> {
        if prob.fixed.is_empty() {
            return Err(OptimError::NoFixedNode);
        }
        let mut counts = vec![0usize; prob.points.len()];
        for o in &prob.observations {
            if !prob.poses.contains_key(&o.keyframe_id) {
                return Err(OptimError::UnknownNode(o.keyframe_id));
            }
            if o.point_id >= prob.points.len() {
                return Err(OptimError::InvalidProblem(format!("point {} out of range", o.point_id)));
            }
            counts[o.point_id] += 1;
        }
        if let Some(p) = counts.iter().position(|&c| c < 2) {
            return Err(OptimError::InvalidProblem(format!("point {p} has fewer than 2 observations")));
        }
        let free: Vec<u64> = prob.poses.keys().copied().filter(|id| !prob.fixed.contains(id)).collect();
        let free_index = free.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let unknowns = 6 * free.len() + 3 * prob.points.len();
        let use_schur = match prob.solver {
            SolverKind::Dense => false,
            SolverKind::Schur => true,
            SolverKind::Auto => unknowns > 300,
        };
        Ok(Self {
            prob,
            free,
            free_index,
            use_schur,
        })
    }

    fn dense_step(&self, lin: &Linear, lambda: f64) -> Option<DVector<f64>> {
        let np = self.free.len();
        let n = 6 * np + 3 * lin.c.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, b) in lin.b.iter().enumerate() {
            h.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(b);
            g.fixed_rows_mut::<6>(6 * i).copy_from(&lin.g_pose[i]);
        }
        for (p, c) in lin.c.iter().enumerate() {
            let o = 6 * np + 3 * p;
            h.fixed_view_mut::<3, 3>(o, o).copy_from(c);
            g.fixed_rows_mut::<3>(o).copy_from(&lin.g_point[p]);
        }
        for (&(i, p), e) in &lin.e {
            let o = 6 * np + 3 * p;
            h.fixed_view_mut::<6, 3>(6 * i, o).copy_from(e);
            h.fixed_view_mut::<3, 6>(o, 6 * i).copy_from(&e.transpose());
        }
        for d in 0..n {
            h[(d, d)] += damp(h[(d, d)], lambda);
        }
        h.cholesky().map(|ch| ch.solve(&(-g)))
    }

    fn schur_step(&self, lin: &Linear, lambda: f64) -> Option<DVector<f64>> {
        let np = self.free.len();
        let damped = |m: &Matrix3<f64>| {
            let mut m = *m;
            for d in 0..3 {
                m[(d, d)] += damp(m[(d, d)], lambda);
            }
            m
        };
        let c_inv: Vec<Matrix3<f64>> = lin
            .c
            .iter()
            .map(|c| damped(c).try_inverse())
            .collect::<Option<_>>()?;
        let mut s = DMatrix::zeros(6 * np, 6 * np);
        let mut rhs = DVector::zeros(6 * np);
        for (i, b) in lin.b.iter().enumerate() {
            let mut b = *b;
            for d in 0..6 {
                b[(d, d)] += damp(b[(d, d)], lambda);
            }
            s.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(&b);
            rhs.fixed_rows_mut::<6>(6 * i).copy_from(&(-lin.g_pose[i]));
        }
        for (p, obs) in lin.observers.iter().enumerate() {
            for &i in obs {
                let eic = lin.e[&(i, p)] * c_inv[p];
                let mut r = rhs.fixed_rows_mut::<6>(6 * i);
                r += eic * lin.g_point[p];
                for &j in obs {
                    let block = eic * lin.e[&(j, p)].transpose();
                    let mut sv = s.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    sv -= block;
                }
            }
        }
        let dx_pose = if np == 0 {
            DVector::zeros(0)
        } else {
            s.cholesky()?.solve(&rhs)
        };
        let mut dx = DVector::zeros(6 * np + 3 * lin.c.len());
        dx.rows_mut(0, 6 * np).copy_from(&dx_pose);
        for (p, obs) in lin.observers.iter().enumerate() {
            let mut r = -lin.g_point[p];
            for &i in obs {
                r -= lin.e[&(i, p)].transpose() * dx_pose.fixed_rows::<6>(6 * i);
            }
            dx.fixed_rows_mut::<3>(6 * np + 3 * p).copy_from(&(c_inv[p] * r));
        }
        Some(dx)
    }
}

impl LeastSquares for BaSolver<'_> {
    type State = BaState;
    type Linear = Linear;

    fn cost(&self, s: &BaState) -> Result<f64, OptimError> {
        let terms: Vec<Option<f64>> = self
            .prob
            .observations
            .par_iter()
            .map(|o| {
                let (e, _, _) = reprojection_jacobians(
                    &s.poses[&o.keyframe_id],
                    &s.points[o.point_id],
                    &o.measured,
                    &self.prob.intrinsics,
                    &self.prob.extrinsics,
                )?;
                Some(huber_cost((e.transpose() * o.information * e)[0], self.prob.huber))
            })
            .collect();
        terms
            .into_iter()
            .map(|t| t.ok_or_else(|| OptimError::InvalidProblem("point behind camera".into())))
            .sum()
    }

    fn linearize(&self, s: &BaState) -> Result<Linear, OptimError> {
        let np = self.free.len();
        let npts = s.points.len();
        let mut lin = Linear {
            b: vec![Matrix6::zeros(); np],
            c: vec![Matrix3::zeros(); npts],
            e: HashMap::new(),
            g_pose: vec![Vector6::zeros(); np],
            g_point: vec![Vector3::zeros(); npts],
            observers: vec![Vec::new(); npts],
        };
        let blocks: Vec<_> = self
            .prob
            .observations
            .par_iter()
            .map(|o| {
                let (e, jp, jx) = reprojection_jacobians(
                    &s.poses[&o.keyframe_id],
                    &s.points[o.point_id],
                    &o.measured,
                    &self.prob.intrinsics,
                    &self.prob.extrinsics,
                )?;
                let w = huber_weight((e.transpose() * o.information * e)[0], self.prob.huber);
                Some((o, e, jp, jx, o.information * w))
            })
            .collect();
        for blk in blocks {
            let (o, e, jp, jx, info) =
                blk.ok_or_else(|| OptimError::InvalidProblem("point behind camera".into()))?;
            let p = o.point_id;
            lin.c[p] += jx.transpose() * info * jx;
            lin.g_point[p] += jx.transpose() * info * e;
            if let Some(&i) = self.free_index.get(&o.keyframe_id) {
                lin.b[i] += jp.transpose() * info * jp;
                lin.g_pose[i] += jp.transpose() * info * e;
                let entry = lin.e.entry((i, p)).or_insert_with(|| {
                    lin.observers[p].push(i);
                    Matrix6x3::zeros()
                });
                *entry += jp.transpose() * info * jx;
            }
        }
        Ok(lin)
    }

    fn gradient_norm_inf(&self, lin: &Linear) -> f64 {
        let a = lin.g_pose.iter().map(|g| g.amax()).fold(0.0, f64::max);
        let b = lin.g_point.iter().map(|g| g.amax()).fold(0.0, f64::max);
        a.max(b)
    }

    fn step(&self, lin: &Linear, lambda: f64) -> Option<DVector<f64>> {
        let dx = if self.use_schur {
            self.schur_step(lin, lambda)
        } else {
            self.dense_step(lin, lambda)
        }?;
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }

    fn retract(&self, s: &BaState, dx: &DVector<f64>) -> BaState {
        let np = self.free.len();
        let mut out = s.clone();
        for (i, id) in self.free.iter().enumerate() {
            let d: Vector6<f64> = dx.fixed_rows::<6>(6 * i).into();
            let p = out.poses.get_mut(id).expect("free pose exists");
            *p = p.compose(&Pose::exp(&d));
        }
        for (k, pt) in out.points.iter_mut().enumerate() {
            *pt += dx.fixed_rows::<3>(6 * np + 3 * k);
        }
        out
    }
}

/// Levenberg-damped Gauss-Newton over free keyframe poses and all points.
pub fn local_bundle_adjust(prob: &BaProblem, cfg: &LmConfig) -> Result<BaResult, OptimError> {
    let solver = BaSolver::new(prob)?;
    let report = levenberg_marquardt(
        &solver,
        BaState {
            poses: prob.poses.clone(),
            points: prob.points.clone(),
        },
        cfg,
    )?;
    Ok(BaResult {
        poses: report.state.poses,
        points: report.state.points,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        costs: report.costs,
        iterations: report.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::default_extrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> Intrinsics {
        Intrinsics {
            fx: 200.0,
            fy: 200.0,
            cx: 160.0,
            cy: 80.0,
            width: 320,
            height: 160,
        }
    }

    /// Keyframes driving along +x, points scattered ahead of them.
    fn consistent_problem(rng: &mut ChaCha8Rng, n_kf: u64, n_pts: usize) -> BaProblem {
        let k = intrinsics();
        let ext = default_extrinsics();
        let poses: BTreeMap<u64, Pose> = (0..n_kf)
            .map(|i| {
                let yaw = rng.random_range(-0.05..0.05);
                (i, Pose::from_yaw(yaw, Vector3::new(i as f64 * 0.8, rng.random_range(-0.2..0.2), 0.0)))
            })
            .collect();
        let points: Vec<Point3> = (0..n_pts)
            .map(|_| {
                Point3::new(
                    rng.random_range(8.0..25.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1.0..2.0),
                )
            })
            .collect();
        let mut observations = Vec::new();
        for (&id, pose) in &poses {
            for (pid, x) in points.iter().enumerate() {
                let pc = ext.apply(&pose.inverse().apply(x));
                let (u, v) = k.project(&pc).unwrap();
                observations.push(Observation::new(id, pid, u, v));
            }
        }
        BaProblem {
            poses,
            points,
            observations,
            intrinsics: k,
            extrinsics: ext,
            fixed: [0, 1].into_iter().collect(),
            huber: Some(2.0),
            solver: SolverKind::Auto,
        }
    }

    #[test]
    fn consistent_problem_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prob = consistent_problem(&mut rng, 4, 30);
        let res = local_bundle_adjust(&prob, &LmConfig::default()).unwrap();
        assert!(res.final_cost < 1e-12);
        for (id, p) in &res.poses {
            assert!(p.max_abs_diff(&prob.poses[id]) < 1e-9);
        }
        for (a, b) in res.points.iter().zip(&prob.points) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn perturbed_point_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prob = consistent_problem(&mut rng, 3, 20);
        prob.fixed = prob.poses.keys().copied().collect();
        let truth = prob.points[5];
        prob.points[5] += Vector3::new(0.3, -0.3, 0.2824);
        assert!((prob.points[5] - truth).norm() > 0.49);
        let before = reprojection_cost(&prob).unwrap();
        let res = local_bundle_adjust(&prob, &LmConfig::default()).unwrap();
        assert!(res.final_cost < before);
        assert!((res.points[5] - truth).norm() < 1e-3);
        assert!(res.final_cost < 1e-10);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = intrinsics();
        let ext = default_extrinsics();
        let h = 1e-6;
        for _ in 0..20 {
            let pose = Pose::from_axis_angle(
                &Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0),
                rng.random_range(-1.0..1.0),
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5)),
            );
            let body = Point3::new(rng.random_range(5.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
            let x = pose.apply(&body);
            let z = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..160.0));
            let (_, jp, jx) = reprojection_jacobians(&pose, &x, &z, &k, &ext).unwrap();
            let res = |p: &Pose, x: &Point3| reprojection_jacobians(p, x, &z, &k, &ext).unwrap().0;
            let mut fd_p = Matrix2x6::zeros();
            for d in 0..6 {
                let mut delta = Vector6::zeros();
                delta[d] = h;
                let plus = res(&pose.compose(&Pose::exp(&delta)), &x);
                let minus = res(&pose.compose(&Pose::exp(&(-delta))), &x);
                fd_p.set_column(d, &((plus - minus) / (2.0 * h)));
            }
            let mut fd_x = Matrix2x3::zeros();
            for d in 0..3 {
                let mut delta = Vector3::zeros();
                delta[d] = h;
                let plus = res(&pose, &(x + delta));
                let minus = res(&pose, &(x - delta));
                fd_x.set_column(d, &((plus - minus) / (2.0 * h)));
            }
            assert!((jp - fd_p).norm() / fd_p.norm() < 1e-5);
            assert!((jx - fd_x).norm() / fd_x.norm() < 1e-5);
        }
    }

    #[test]
    fn dense_and_schur_agree_and_costs_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut prob = consistent_problem(&mut rng, 5, 40);
        for (i, p) in prob.points.iter_mut().enumerate() {
            if i % 3 == 0 {
                *p += Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            }
        }
        for (id, p) in prob.poses.iter_mut() {
            if *id >= 2 {
                *p = p.compose(&Pose::from_yaw(0.01, Vector3::new(0.05, -0.03, 0.02)));
            }
        }
        let mut results = Vec::new();
        for solver in [SolverKind::Dense, SolverKind::Schur] {
            let r = local_bundle_adjust(&BaProblem { solver, ..prob.clone() }, &LmConfig::default()).unwrap();
            assert!(r.costs.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.final_cost < 1e-8 * r.initial_cost, "{} -> {}", r.initial_cost, r.final_cost);
            results.push(r);
        }
        for (a, b) in results[0].points.iter().zip(&results[1].points) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn outlier_is_downweighted_by_huber() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prob = consistent_problem(&mut rng, 3, 25);
        prob.observations[7].measured += Vector2::new(40.0, -30.0);
        let res = local_bundle_adjust(&prob, &LmConfig::default()).unwrap();
        assert!(res.costs.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.final_cost <= res.initial_cost);
    }

    #[test]
    fn problems_without_anchor_or_support_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut prob = consistent_problem(&mut rng, 2, 5);
        prob.fixed.clear();
        assert_eq!(local_bundle_adjust(&prob, &LmConfig::default()), Err(OptimError::NoFixedNode));
        let mut prob = consistent_problem(&mut rng, 2, 5);
        prob.observations.retain(|o| !(o.point_id == 0 && o.keyframe_id == 1));
        assert!(matches!(local_bundle_adjust(&prob, &LmConfig::default()), Err(OptimError::InvalidProblem(_))));
    }
}
