//! Dense point-to-plane ICP, seeded by the feature registration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::voxel_downsample;
use crate::geometry::{so3_exp, Point3, Pose};
use crate::par::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    /// 0 disables the refinement.
    pub iterations: usize,
    /// Correspondence gate of the first iteration; it shrinks geometrically
    /// to `min_distance`.
    pub max_distance: f64,
    pub min_distance: f64,
    /// Voxel of the registration cloud kept per scan (ground included).
    pub voxel: f64,
    /// Coarser voxel applied to the moving cloud.
    pub source_voxel: f64,
    /// Neighbourhood radius of the target normals.
    pub normal_radius: f64,
    /// Fewer pairs than this keeps the seed.
    pub min_pairs: usize,
    /// A refinement moving the seed by more than this is rejected.
    pub max_correction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            max_distance: 0.5,
            min_distance: 0.1,
            voxel: 0.25,
            source_voxel: 0.4,
            normal_radius: 0.5,
            min_pairs: 200,
            max_correction: 0.5,
        }
    }
}

type Cell = (i64, i64, i64);

/// Uniform hash grid for fixed-radius nearest-neighbour queries.
pub struct PointGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<Cell, Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Point3, cell: f64) -> Cell {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Nearest point within `radius` (at most the cell size).
    pub fn nearest(&self, q: &Point3, radius: f64) -> Option<&'a Point3> {
        self.nearest_index(q, radius).map(|i| &self.points[i])
    }

    /// All points within `radius` (at most the cell size).
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<Point3> {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            ids.iter()
                                .map(|&i| self.points[i as usize])
                                .filter(|p| (p - q).norm_squared() <= radius * radius),
                        );
                    }
                }
            }
        }
        out
    }

    pub fn nearest_index(&self, q: &Point3, radius: f64) -> Option<usize> {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut best: Option<(f64, u32)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in ids {
                        let d = (self.points[i as usize] - q).norm_squared();
                        if d <= radius * radius && best.is_none_or(|b| d < b.0) {
                            best = Some((d, i));
                        }
                    }
                }
            }
        }
        best.map(|(_, i)| i as usize)
    }
}

/// Target cloud with per-point unit normals, built once and reused while it
/// stays the registration target.
#[derive(Debug, Clone, Default)]
pub struct IcpTarget {
    pub points: Vec<Point3>,
    pub normals: Vec<Vector3<f64>>,
}

impl IcpTarget {
    /// Normals from the covariance of neighbours within `radius`; points
    /// without a clear plane are dropped.
    pub fn new(points: &[Point3], radius: f64) -> Self {
        let grid = PointGrid::new(points, radius);
        let fitted: Vec<Option<(Point3, Vector3<f64>)>> = points
            .par_iter()
            .map(|p| {
                let nb = grid.within(p, radius);
                if nb.len() < 5 {
                    return None;
                }
                let c = nb.iter().fold(Vector3::zeros(), |a, q| a + q.coords) / nb.len() as f64;
                let cov = nb.iter().fold(Matrix3::zeros(), |a, q| {
                    let d = q.coords - c;
                    a + d * d.transpose()
                });
                let eig = cov.symmetric_eigen();
                let mut idx = [0, 1, 2];
                idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
                // Flat: smallest spread well below the middle one.
                (eig.eigenvalues[idx[0]] < 0.1 * eig.eigenvalues[idx[1]])
                    .then(|| (*p, eig.eigenvectors.column(idx[0]).into_owned()))
            })
            .collect();
        let (points, normals) = fitted.into_iter().flatten().unzip();
        Self { points, normals }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Point-to-plane refinement of `seed` (source body frame into target body
/// frame). Returns the refined pose and the final pair count, or `None`
/// when the refinement is unusable and the seed should be kept.
pub fn refine_icp(target: &IcpTarget, source: &[Point3], seed: &Pose, cfg: &IcpConfig) -> Option<(Pose, usize)> {
    if cfg.iterations == 0 || target.is_empty() || source.is_empty() {
        return None;
    }
    let grid = PointGrid::new(&target.points, cfg.max_distance);
    let source = voxel_downsample(source, cfg.source_voxel);
    let shrink = (cfg.min_distance / cfg.max_distance).powf(1.0 / (cfg.iterations.max(2) - 1) as f64);
    let mut pose = *seed;
    let mut pairs = 0;
    let mut gate = cfg.max_distance;
    for _ in 0..cfg.iterations {
        let terms: Vec<(Vector6<f64>, f64)> = source
            .par_iter()
            .filter_map(|p| {
                let x = pose.apply(p);
                let i = grid.nearest_index(&x, gate)?;
                let n = target.normals[i];
                let r = n.dot(&(x - target.points[i]));
                let mut j = Vector6::zeros();
                j.fixed_rows_mut::<3>(0).copy_from(&x.coords.cross(&n));
                j.fixed_rows_mut::<3>(3).copy_from(&n);
                Some((j, r))
            })
            .collect();
        pairs = terms.len();
        if pairs < cfg.min_pairs {
            return None;
        }
        let (mut h, mut g) = (Matrix6::zeros(), Vector6::zeros());
        for (j, r) in &terms {
            h += j * j.transpose();
            g += j * *r;
        }
        let dx = h.cholesky()?.solve(&(-g));
        let w = dx.fixed_rows::<3>(0).into_owned();
        let rot = so3_exp(&w);
        pose = Pose {
            rotation: rot * pose.rotation,
            translation: rot * pose.translation + dx.fixed_rows::<3>(3),
        };
        gate = (gate * shrink).max(cfg.min_distance);
    }
    pose.rotation = crate::geometry::orthonormalize(&pose.rotation);
    let d = seed.between(&pose);
    (d.translation.norm() <= cfg.max_correction).then_some((pose, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three orthogonal planes, sampled on a 5 cm grid.
    fn corner() -> Vec<Point3> {
        let mut out = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let (a, b) = (i as f64 * 0.05, j as f64 * 0.05);
                out.push(Point3::new(a, b, 0.0));
                out.push(Point3::new(a, 0.0, b));
                out.push(Point3::new(0.0, a, b));
            }
        }
        out
    }

    #[test]
    fn grid_nearest_matches_brute_force() {
        let pts = corner();
        let grid = PointGrid::new(&pts, 0.3);
        for q in [Point3::new(0.51, 0.27, 0.03), Point3::new(1.0, 1.0, 1.0), Point3::new(0.02, 0.9, 1.4)] {
            let brute = pts
                .iter()
                .filter(|p| (*p - q).norm() <= 0.3)
                .min_by(|a, b| (*a - q).norm().total_cmp(&(*b - q).norm()));
            assert_eq!(grid.nearest(&q, 0.3), brute);
        }
    }

    #[test]
    fn recovers_small_offset() {
        let target = corner();
        let truth = Pose::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), 0.02, Vector3::new(0.06, -0.04, 0.03));
        let source: Vec<Point3> = target.iter().map(|p| truth.inverse().apply(p)).collect();
        let cfg = IcpConfig {
            iterations: 12,
            source_voxel: 0.1,
            min_pairs: 50,
            ..IcpConfig::default()
        };
        let (pose, _) = refine_icp(&IcpTarget::new(&target, 0.2), &source, &Pose::identity(), &cfg).unwrap();
        assert!(pose.max_abs_diff(&truth) < 1e-3, "{pose:?}");
    }

    #[test]
    fn disabled_keeps_seed() {
        let pts = corner();
        let cfg = IcpConfig {
            iterations: 0,
            ..IcpConfig::default()
        };
        assert!(refine_icp(&IcpTarget::new(&pts, 0.2), &pts, &Pose::identity(), &cfg).is_none());
    }
}
