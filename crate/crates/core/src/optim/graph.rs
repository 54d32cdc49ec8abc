use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{damp, levenberg_marquardt, LeastSquares, LmConfig, OptimError};
use crate::geometry::{se3_log, se3_right_jacobian_inv, Pose};

/// Relative-pose measurement `T_i^-1 T_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub i: u64,
    pub j: u64,
    pub measured: Pose,
    pub information: Matrix6<f64>,
}

/// Translation weight 1, rotation weight 100.
pub fn default_edge_information() -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 100.0, 100.0, 100.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: BTreeMap<u64, Pose>,
    pub edges: Vec<PoseEdge>,
    pub fixed: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphResult {
    pub poses: BTreeMap<u64, Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub costs: Vec<f64>,
}

impl PoseGraph {
    pub fn add_edge(&mut self, i: u64, j: u64, measured: Pose, information: Matrix6<f64>) -> Result<(), OptimError> {
        for id in [i, j] {
            if !self.nodes.contains_key(&id) {
                return Err(OptimError::UnknownNode(id));
            }
        }
        self.edges.push(PoseEdge {
            i,
            j,
            measured,
            information,
        });
        Ok(())
    }

    /// Sum of `e^T Omega e` over all edges.
    pub fn cost(&self) -> Result<f64, OptimError> {
        let mut total = 0.0;
        for e in &self.edges {
            let r = edge_residual(&self.nodes[&e.i], &self.nodes[&e.j], &e.measured)?;
            total += (r.transpose() * e.information * r)[0];
        }
        Ok(total)
    }

    fn check(&self) -> Result<(), OptimError> {
        if self.fixed.is_empty() {
            return Err(OptimError::NoFixedNode);
        }
        let mut adj: HashMap<u64, Vec<u64>> = HashMap::new();
        for e in &self.edges {
            for id in [e.i, e.j] {
                if !self.nodes.contains_key(&id) {
                    return Err(OptimError::UnknownNode(id));
                }
            }
            adj.entry(e.i).or_default().push(e.j);
            adj.entry(e.j).or_default().push(e.i);
        }
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        let mut queue: VecDeque<u64> = VecDeque::new();
        for &f in &self.fixed {
            if !self.nodes.contains_key(&f) {
                return Err(OptimError::UnknownNode(f));
            }
            if seen.insert(f) {
                queue.push_back(f);
            }
        }
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        match self.nodes.keys().find(|id| !seen.contains(id)) {
            Some(&id) => Err(OptimError::DisconnectedGraph(id)),
            None => Ok(()),
        }
    }
}

fn edge_residual(ti: &Pose, tj: &Pose, z: &Pose) -> Result<Vector6<f64>, OptimError> {
    Ok(se3_log(&z.inverse().compose(&ti.inverse().compose(tj)))?)
}

/// Residual `log(Z^-1 T_i^-1 T_j)` with its Jacobians for right
/// perturbations of `T_i` and `T_j`.
pub fn pose_edge_jacobians(
    ti: &Pose,
    tj: &Pose,
    z: &Pose,
) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>), OptimError> {
    let e = edge_residual(ti, tj, z)?;
    let jr_inv = se3_right_jacobian_inv(&e);
    let ad = tj.inverse().compose(ti).adjoint();
    Ok((e, -jr_inv * ad, jr_inv))
}

struct GraphSolver<'a> {
    g: &'a PoseGraph,
    free_index: HashMap<u64, usize>,
    free: Vec<u64>,
}

struct Linear {
    h: DMatrix<f64>,
    g: DVector<f64>,
}

impl LeastSquares for GraphSolver<'_> {
    type State = BTreeMap<u64, Pose>;
    type Linear = Linear;

    fn cost(&self, s: &Self::State) -> Result<f64, OptimError> {
        let mut total = 0.0;
        for e in &self.g.edges {
            let r = edge_residual(&s[&e.i], &s[&e.j], &e.measured)?;
            total += (r.transpose() * e.information * r)[0];
        }
        Ok(total)
    }

    fn linearize(&self, s: &Self::State) -> Result<Linear, OptimError> {
        let n = 6 * self.free.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for e in &self.g.edges {
            let (r, ji, jj) = pose_edge_jacobians(&s[&e.i], &s[&e.j], &e.measured)?;
            let blocks = [(self.free_index.get(&e.i), ji), (self.free_index.get(&e.j), jj)];
            for (a, ja) in &blocks {
                let Some(&a) = a else { continue };
                let mut ga = g.fixed_rows_mut::<6>(6 * a);
                ga += ja.transpose() * e.information * r;
                for (b, jb) in &blocks {
                    let Some(&b) = b else { continue };
                    let mut hab = h.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    hab += ja.transpose() * e.information * jb;
                }
            }
        }
        Ok(Linear { h, g })
    }

    fn gradient_norm_inf(&self, lin: &Linear) -> f64 {
        lin.g.amax()
    }

    fn step(&self, lin: &Linear, lambda: f64) -> Option<DVector<f64>> {
        if lin.g.is_empty() {
            return None;
        }
        let mut h = lin.h.clone();
        for d in 0..h.nrows() {
            h[(d, d)] += damp(h[(d, d)], lambda);
        }
        let dx = h.cholesky()?.solve(&(-&lin.g));
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }

    fn retract(&self, s: &Self::State, dx: &DVector<f64>) -> Self::State {
        let mut out = s.clone();
        for (k, id) in self.free.iter().enumerate() {
            let d: Vector6<f64> = dx.fixed_rows::<6>(6 * k).into();
            let p = out.get_mut(id).expect("free node exists");
            *p = p.compose(&Pose::exp(&d));
        }
        out
    }
}

/// Minimises `sum |log(Z_ij^-1 T_i^-1 T_j)|^2_Omega` over the non-fixed
/// nodes.
pub fn optimize_pose_graph(g: &PoseGraph, cfg: &LmConfig) -> Result<GraphResult, OptimError> {
    g.check()?;
    let free: Vec<u64> = g.nodes.keys().copied().filter(|id| !g.fixed.contains(id)).collect();
    let solver = GraphSolver {
        g,
        free_index: free.iter().enumerate().map(|(k, id)| (*id, k)).collect(),
        free,
    };
    let report = levenberg_marquardt(&solver, g.nodes.clone(), cfg)?;
    Ok(GraphResult {
        poses: report.state,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        costs: report.costs,
    })
}

fn pose_fields(p: &Pose) -> String {
    let q = p.quaternion();
    let t = p.translation;
    format!(
        "{} {} {} {} {} {} {}",
        t.x, t.y, t.z, q.coords.x, q.coords.y, q.coords.z, q.coords.w
    )
}

/// Text edge list: `VERTEX id tx ty tz qx qy qz qw`, `FIX id`, and
/// `EDGE i j tx ty tz qx qy qz qw` followed by the 21 upper-triangular
/// information entries.
pub fn write_pose_graph(g: &PoseGraph) -> String {
    let mut out = String::new();
    for (id, p) in &g.nodes {
        writeln!(out, "VERTEX {id} {}", pose_fields(p)).unwrap();
    }
    for id in &g.fixed {
        writeln!(out, "FIX {id}").unwrap();
    }
    for e in &g.edges {
        write!(out, "EDGE {} {} {}", e.i, e.j, pose_fields(&e.measured)).unwrap();
        for r in 0..6 {
            for c in r..6 {
                write!(out, " {}", e.information[(r, c)]).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_pose_graph(text: &str) -> Result<PoseGraph, OptimError> {
    let mut g = PoseGraph::default();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        let bad = || OptimError::Format(format!("line {}", n + 1));
        let id = |s: &str| s.parse::<u64>().map_err(|_| bad());
        let nums = |s: &[&str]| -> Result<Vec<f64>, OptimError> {
            s.iter().map(|x| x.parse::<f64>().map_err(|_| bad())).collect()
        };
        let pose = |v: &[f64]| Pose::from_xyzw(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6]);
        match (f[0], f.len()) {
            ("VERTEX", 9) => {
                g.nodes.insert(id(f[1])?, pose(&nums(&f[2..])?));
            }
            ("FIX", 2) => {
                g.fixed.insert(id(f[1])?);
            }
            ("EDGE", 31) => {
                let v = nums(&f[3..])?;
                let mut info = Matrix6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = v[k];
                        info[(c, r)] = v[k];
                        k += 1;
                    }
                }
                g.edges.push(PoseEdge {
                    i: id(f[1])?,
                    j: id(f[2])?,
                    measured: pose(&v[..7]),
                    information: info,
                });
            }
            _ => return Err(bad()),
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn chain(poses: &[Pose]) -> PoseGraph {
        let mut g = PoseGraph::default();
        for (i, p) in poses.iter().enumerate() {
            g.nodes.insert(i as u64, *p);
        }
        for i in 1..poses.len() {
            let z = poses[i - 1].inverse().compose(&poses[i]);
            g.add_edge(i as u64 - 1, i as u64, z, default_edge_information()).unwrap();
        }
        g.fixed.insert(0);
        g
    }

    #[test]
    fn consistent_chain_is_unchanged() {
        let poses: Vec<Pose> = (0..6).map(|i| Pose::from_yaw(0.1 * i as f64, Vector3::new(i as f64, 0.5, 0.0))).collect();
        let g = chain(&poses);
        let r = optimize_pose_graph(&g, &LmConfig::default()).unwrap();
        assert!(r.final_cost < 1e-20);
        for (i, p) in poses.iter().enumerate() {
            assert!(r.poses[&(i as u64)].max_abs_diff(p) < 1e-9);
        }
    }

    /// Square of side 10 m; odometry edges rotated 2 degrees, loop edge exact.
    #[test]
    fn square_loop_drift_is_corrected() {
        let truth: Vec<Pose> = (0..5)
            .map(|k| {
                let corners = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0), (0.0, 0.0)];
                let (x, y) = corners[k];
                Pose::from_yaw(FRAC_PI_2 * k as f64, Vector3::new(x, y, 0.0))
            })
            .collect();
        let bias = Pose::from_yaw(2f64.to_radians(), Vector3::zeros());
        let mut g = PoseGraph::default();
        g.nodes.insert(0, truth[0]);
        g.fixed.insert(0);
        let mut dead = truth[0];
        for k in 1..5 {
            let z = truth[k - 1].inverse().compose(&truth[k]).compose(&bias);
            dead = dead.compose(&z);
            g.nodes.insert(k as u64, dead);
            g.add_edge(k as u64 - 1, k as u64, z, default_edge_information()).unwrap();
        }
        // Node 4 revisits node 0.
        g.add_edge(0, 4, truth[0].inverse().compose(&truth[4]), default_edge_information() * 100.0).unwrap();
        let before = (g.nodes[&4].translation - truth[4].translation).norm();
        let r = optimize_pose_graph(&g, &LmConfig::default()).unwrap();
        let after = (r.poses[&4].translation - truth[4].translation).norm();
        assert!(before > 0.5, "construction: {before}");
        assert!(after < before / 5.0, "{before} -> {after}");
        assert!(r.costs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn all_fixed_graph_is_unchanged() {
        let mut g = PoseGraph::default();
        g.nodes.insert(0, Pose::identity());
        g.nodes.insert(1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        g.fixed.extend([0, 1]);
        g.add_edge(0, 1, Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)), Matrix6::identity()).unwrap();
        let r = optimize_pose_graph(&g, &LmConfig::default()).unwrap();
        assert_eq!(r.poses, g.nodes);
        assert!((r.final_cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn structural_errors() {
        let mut g = PoseGraph::default();
        g.nodes.insert(0, Pose::identity());
        g.nodes.insert(1, Pose::identity());
        assert_eq!(optimize_pose_graph(&g, &LmConfig::default()), Err(OptimError::NoFixedNode));
        g.fixed.insert(0);
        assert_eq!(optimize_pose_graph(&g, &LmConfig::default()), Err(OptimError::DisconnectedGraph(1)));
        assert_eq!(
            g.add_edge(0, 7, Pose::identity(), Matrix6::identity()),
            Err(OptimError::UnknownNode(7))
        );
    }

    #[test]
    fn edge_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rp = |rng: &mut ChaCha8Rng| {
            Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        };
        let h = 1e-6;
        for _ in 0..20 {
            let (ti, tj) = (rp(&mut rng), rp(&mut rng));
            let z = ti.inverse().compose(&tj).compose(&Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3))));
            let (_, ji, jj) = pose_edge_jacobians(&ti, &tj, &z).unwrap();
            let mut fi = Matrix6::zeros();
            let mut fj = Matrix6::zeros();
            for d in 0..6 {
                let mut dv = Vector6::zeros();
                dv[d] = h;
                let r = |a: &Pose, b: &Pose| edge_residual(a, b, &z).unwrap();
                fi.set_column(d, &((r(&ti.compose(&Pose::exp(&dv)), &tj) - r(&ti.compose(&Pose::exp(&-dv)), &tj)) / (2.0 * h)));
                fj.set_column(d, &((r(&ti, &tj.compose(&Pose::exp(&dv))) - r(&ti, &tj.compose(&Pose::exp(&-dv)))) / (2.0 * h)));
            }
            assert!((ji - fi).norm() / fi.norm() < 1e-5);
            assert!((jj - fj).norm() / fj.norm() < 1e-5);
        }
    }

    #[test]
    fn text_round_trip() {
        let poses: Vec<Pose> = (0..3).map(|i| Pose::from_yaw(0.3 * i as f64, Vector3::new(i as f64, 1.0, 2.0))).collect();
        let g = chain(&poses);
        let back = read_pose_graph(&write_pose_graph(&g)).unwrap();
        assert_eq!(back.fixed, g.fixed);
        assert_eq!(back.edges.len(), 2);
        for (id, p) in &g.nodes {
            assert!(back.nodes[id].max_abs_diff(p) < 1e-12);
        }
        assert_eq!(back.edges[0].information, g.edges[0].information);
        assert!(read_pose_graph("EDGE 0 1 2").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn optimization_is_gauge_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Pose> = (0..6).map(|i| Pose::from_yaw(0.4 * i as f64, Vector3::new(3.0 * (0.4 * i as f64).cos(), 3.0 * (0.4 * i as f64).sin(), 0.0))).collect();
            let mut g = chain(&truth);
            for e in g.edges.iter_mut() {
                e.measured = e.measured.compose(&Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05))));
            }
            g.add_edge(0, 5, truth[0].inverse().compose(&truth[5]), default_edge_information()).unwrap();
            let gauge = Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let mut moved = g.clone();
            for p in moved.nodes.values_mut() {
                *p = gauge.compose(p);
            }
            let a = optimize_pose_graph(&g, &LmConfig::default()).unwrap();
            let b = optimize_pose_graph(&moved, &LmConfig::default()).unwrap();
            for (id, p) in &a.poses {
                prop_assert!(gauge.compose(p).max_abs_diff(&b.poses[id]) < 1e-8);
            }
        }
    }
}
