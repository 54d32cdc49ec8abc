//! Damped Gauss-Newton solvers: local bundle adjustment over keyframe poses
//! and map points, pose-graph optimization, and two-factor pose fusion.
//!
//! Pose increments are 6-vectors `[rho; phi]` applied on the right.

mod ba;
mod graph;

use nalgebra::{DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_log, se3_right_jacobian_inv, GeometryError, Pose};

pub use ba::{
    local_bundle_adjust, reprojection_cost, reprojection_jacobians, BaProblem, BaResult,
    Observation, SolverKind,
};
pub use graph::{
    default_edge_information, optimize_pose_graph, pose_edge_jacobians, read_pose_graph,
    write_pose_graph, GraphResult, PoseEdge, PoseGraph,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("damping exceeded {lambda:e} without an accepted step")]
    Diverged { lambda: f64 },
    #[error("node {0} is not connected to a fixed node")]
    DisconnectedGraph(u64),
    #[error("no fixed node to anchor the gauge")]
    NoFixedNode,
    #[error("unknown node {0}")]
    UnknownNode(u64),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("malformed pose graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub lambda0: f64,
    pub lambda_max: f64,
    pub rel_tol: f64,
    pub grad_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            lambda0: 1e-4,
            lambda_max: 1e10,
            rel_tol: 1e-8,
            grad_tol: 1e-10,
        }
    }
}

/// Outcome of a solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct LmReport<S> {
    pub state: S,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

pub(crate) trait LeastSquares {
    type State: Clone;
    type Linear;
    fn cost(&self, s: &Self::State) -> Result<f64, OptimError>;
    fn linearize(&self, s: &Self::State) -> Result<Self::Linear, OptimError>;
    fn gradient_norm_inf(&self, lin: &Self::Linear) -> f64;
    /// Solves the damped normal equations for the increment.
    fn step(&self, lin: &Self::Linear, lambda: f64) -> Option<DVector<f64>>;
    fn retract(&self, s: &Self::State, dx: &DVector<f64>) -> Self::State;
}

/// Levenberg loop: `lambda` shrinks by 10 after an accepted step and grows
/// by 10 after a rejected one.
pub(crate) fn levenberg_marquardt<P: LeastSquares>(
    p: &P,
    x0: P::State,
    cfg: &LmConfig,
) -> Result<LmReport<P::State>, OptimError> {
    let mut x = x0;
    let initial_cost = p.cost(&x)?;
    let mut cost = initial_cost;
    let mut costs = vec![cost];
    let mut lambda = cfg.lambda0;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iters {
        if cost == 0.0 {
            break;
        }
        let lin = p.linearize(&x)?;
        if p.gradient_norm_inf(&lin) < cfg.grad_tol {
            break;
        }
        iterations += 1;
        loop {
            if lambda > cfg.lambda_max {
                if costs.len() == 1 {
                    return Err(OptimError::Diverged { lambda });
                }
                break 'outer;
            }
            let candidate = p.step(&lin, lambda).map(|dx| p.retract(&x, &dx));
            let new_cost = match &candidate {
                Some(c) => p.cost(c).unwrap_or(f64::INFINITY),
                None => f64::INFINITY,
            };
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                x = candidate.expect("finite cost implies a candidate");
                cost = new_cost;
                costs.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                if rel < cfg.rel_tol {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
        }
    }
    Ok(LmReport {
        state: x,
        initial_cost,
        final_cost: cost,
        costs,
        iterations,
    })
}

/// Marquardt damping with a floor so that directions the data leaves
/// unconstrained still receive some regularisation.
#[inline]
pub(crate) fn damp(diag: f64, lambda: f64) -> f64 {
    lambda * diag.max(1e-6)
}

/// Pose minimising `|log(a^-1 T)|^2_Oa + |log(b^-1 T)|^2_Ob`.
pub fn fuse_two_poses(
    a: &Pose,
    info_a: &Matrix6<f64>,
    b: &Pose,
    info_b: &Matrix6<f64>,
) -> Result<Pose, OptimError> {
    if (info_a + info_b).cholesky().is_none() {
        return Err(OptimError::SingularInformation);
    }
    let mut t = *a;
    for _ in 0..100 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (m, info) in [(a, info_a), (b, info_b)] {
            let e = se3_log(&m.inverse().compose(&t))?;
            let j = se3_right_jacobian_inv(&e);
            h += j.transpose() * info * j;
            g += j.transpose() * info * e;
        }
        let dx = h
            .cholesky()
            .ok_or(OptimError::SingularInformation)?
            .solve(&(-g));
        t = t.compose(&Pose::exp(&dx));
        if dx.norm() < 1e-14 {
            break;
        }
    }
    Ok(t)
}
