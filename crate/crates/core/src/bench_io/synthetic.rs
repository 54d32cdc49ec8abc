use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::geometry::{Intrinsics, Point3, PointCloud, Pose};
use crate::par::*;
use crate::raster::default_extrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Slab test; entry distance along a unit direction, if hit in front.
    pub fn hit(&self, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut lo, mut hi) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    fn planar_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min.x - x).max(x - self.max.x).max(0.0);
        let dy = (self.min.y - y).max(y - self.max.y).max(0.0);
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathKind {
    /// Counter-clockwise square with rounded corners, then `overlap` more
    /// meters along the same route (possibly several laps).
    Square { leg: f64, overlap: f64, corner_radius: f64 },
    Straight { length: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub path: PathKind,
    pub step: f64,
    pub noise_sigma: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    /// Rays per virtual-camera pixel along each axis.
    pub ray_density: f64,
    /// Geometry seed; the noise seed is separate.
    pub layout_seed: u64,
    /// Boxes per 100 m of path and side.
    pub box_density: f64,
    /// Boxes stay at least this far from the path centerline.
    pub clearance: f64,
    pub band: f64,
    pub scan_rate_hz: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::square_loop()
    }
}

impl WorldSpec {
    /// Four 50 m legs and 40 m of overlap.
    pub fn square_loop() -> Self {
        Self {
            path: PathKind::Square {
                leg: 50.0,
                overlap: 40.0,
                corner_radius: 10.0,
            },
            step: 0.5,
            noise_sigma: 0.02,
            sensor_height: 1.7,
            max_range: 60.0,
            ray_density: 1.25,
            layout_seed: 1,
            box_density: 40.0,
            clearance: 3.5,
            band: 14.0,
            scan_rate_hz: 10.0,
        }
    }

    pub fn straight(length: f64) -> Self {
        Self {
            path: PathKind::Straight { length },
            ..Self::square_loop()
        }
    }

    /// `square`, `straight:<meters>`, optionally followed by `:key=value,..`
    /// overrides of `step`, `noise`, `leg`, `overlap`, `layout`, `density`.
    pub fn parse(spec: &str) -> Result<Self, BenchError> {
        let bad = |m: String| BenchError::Config(format!("synthetic spec {spec:?}: {m}"));
        let mut parts = spec.split(':');
        let kind = parts.next().unwrap_or("");
        let mut out = match kind {
            "square" | "" => Self::square_loop(),
            "straight" => {
                let len = parts
                    .next()
                    .ok_or_else(|| bad("missing length".into()))?
                    .parse::<f64>()
                    .map_err(|e| bad(e.to_string()))?;
                Self::straight(len)
            }
            other => return Err(bad(format!("unknown world {other:?}"))),
        };
        for kv in parts.flat_map(|p| p.split(',')).filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
            let x: f64 = v.parse().map_err(|_| bad(format!("bad number {v:?}")))?;
            match (k, &mut out.path) {
                ("step", _) => out.step = x,
                ("noise", _) => out.noise_sigma = x,
                ("layout", _) => out.layout_seed = x as u64,
                ("density", _) => out.box_density = x,
                ("range", _) => out.max_range = x,
                ("leg", PathKind::Square { leg, .. }) => *leg = x,
                ("overlap", PathKind::Square { overlap, .. }) => *overlap = x,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        if !(out.step > 0.0) || out.noise_sigma < 0.0 {
            return Err(bad("step must be positive and noise non-negative".into()));
        }
        Ok(out)
    }
}

/// Segments `(length, curvature)` of the route, and the length after which
/// it repeats from the start (closed loops) if any.
fn route(kind: &PathKind) -> (Vec<(f64, f64)>, f64) {
    match *kind {
        PathKind::Straight { length } => (vec![(length, 0.0)], length),
        PathKind::Square {
            leg,
            overlap,
            corner_radius: r,
        } => {
            let straight = leg - 2.0 * r;
            let mut segs = Vec::new();
            for _ in 0..4 {
                segs.push((straight / 2.0, 0.0));
                segs.push((FRAC_PI_2 * r, 1.0 / r));
                segs.push((straight / 2.0, 0.0));
            }
            let lap: f64 = segs.iter().map(|s| s.0).sum();
            // Further laps, truncated to the overlap.
            let lap_segs = segs.clone();
            let mut left = overlap;
            for s in lap_segs.iter().cycle() {
                if left <= 1e-12 {
                    break;
                }
                segs.push((s.0.min(left), s.1));
                left -= s.0;
            }
            (segs, lap + overlap)
        }
    }
}

/// Planar route sampled every `step` meters of arc length: `(x, y, heading)`.
/// `extra` meters are appended straight ahead.
fn sample_path(kind: &PathKind, step: f64, extra: f64) -> Vec<(f64, f64, f64)> {
    let (mut segs, total) = route(kind);
    segs.push((extra, 0.0));
    let n = ((total + extra) / step + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let (mut x, mut y, mut h) = (0.0f64, 0.0f64, 0.0f64);
    let mut seg = 0;
    let mut used = 0.0f64;
    out.push((x, y, h));
    // Sub-steps so segment boundaries fall between samples exactly enough.
    let sub = 20;
    for _ in 1..n {
        for _ in 0..sub {
            let ds = step / sub as f64;
            while seg < segs.len() && used + 1e-12 >= segs[seg].0 {
                used -= segs[seg].0;
                seg += 1;
            }
            let k = segs.get(seg).map_or(0.0, |s| s.1);
            if k == 0.0 {
                x += ds * h.cos();
                y += ds * h.sin();
            } else {
                let h1 = h + ds * k;
                x += (h1.sin() - h.sin()) / k;
                y -= (h1.cos() - h.cos()) / k;
                h = h1;
            }
            used += ds;
        }
        out.push((x, y, h));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub boxes: Vec<Aabb>,
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub extrinsics: Pose,
    /// Unit ray directions in the body frame, column-major, with each
    /// column's body azimuth.
    rays: Vec<Vector3<f64>>,
    columns: Vec<f64>,
}

fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (px - a.0 - t * dx).hypot(py - a.1 - t * dy)
}

impl SyntheticWorld {
    pub fn new(spec: &WorldSpec) -> Self {
        Self::with_sensor(spec, Intrinsics::default(), default_extrinsics())
    }

    pub fn with_sensor(spec: &WorldSpec, intrinsics: Intrinsics, extrinsics: Pose) -> Self {
        let path = sample_path(&spec.path, spec.step, 0.0);
        let h = spec.sensor_height;
        let poses: Vec<Pose> = path
            .iter()
            .map(|&(x, y, yaw)| Pose::from_yaw(yaw, Vector3::new(x, y, h)))
            .collect();
        // Scenery continues past the end so the last scans are not empty.
        let boxes = layout_boxes(spec, &sample_path(&spec.path, spec.step, spec.max_range));

        let cols = (intrinsics.width as f64 * spec.ray_density).round() as usize;
        let rows = (intrinsics.height as f64 * spec.ray_density).round() as usize;
        let to_body = extrinsics.inverse();
        let mut rays = Vec::with_capacity(cols * rows);
        let mut columns = Vec::with_capacity(cols);
        for i in 0..cols {
            let u = (i as f64 + 0.5) / spec.ray_density - 0.5;
            for j in 0..rows {
                let v = (j as f64 + 0.5) / spec.ray_density - 0.5;
                let dc = Vector3::new((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0);
                rays.push((to_body.rotation * dc).normalize());
            }
            let d = rays[rays.len() - 1];
            columns.push(d.y.atan2(d.x));
        }
        Self {
            spec: spec.clone(),
            boxes,
            poses,
            intrinsics,
            extrinsics,
            rays,
            columns,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].translation - w[0].translation).norm()).sum()
    }

    pub fn stamp(&self, i: usize) -> f64 {
        i as f64 / self.spec.scan_rate_hz
    }

    /// Noiseless range along a world-frame unit ray, ground included.
    pub fn cast(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        self.cast_among(origin, dir, self.boxes.iter())
    }

    fn cast_among<'a>(&self, origin: &Point3, dir: &Vector3<f64>, boxes: impl Iterator<Item = &'a Aabb>) -> Option<f64> {
        let mut best = if dir.z < -1e-12 { -origin.z / dir.z } else { f64::INFINITY };
        for b in boxes {
            if let Some(t) = b.hit(origin, dir) {
                best = best.min(t);
            }
        }
        (best <= self.spec.max_range).then_some(best)
    }

    /// Scan from an arbitrary body pose; `rng` supplies range noise.
    pub fn scan_at(&self, pose: &Pose, frame_id: u64, rng: Option<&mut ChaCha8Rng>) -> PointCloud {
        let o = Point3::from(pose.translation);
        let yaw = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);
        // Azimuth interval of each nearby box relative to the heading, for culling.
        let near: Vec<(f64, f64, &Aabb)> = self
            .boxes
            .iter()
            .filter(|b| b.planar_distance(o.x, o.y) <= self.spec.max_range)
            .filter_map(|b| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (x, y) in [(b.min.x, b.min.y), (b.min.x, b.max.y), (b.max.x, b.min.y), (b.max.x, b.max.y)] {
                    let a = wrap(((y - o.y).atan2(x - o.x)) - yaw);
                    lo = lo.min(a);
                    hi = hi.max(a);
                }
                // Boxes straddling the rear seam are behind the sensor.
                (hi - lo < PI).then_some((lo, hi, b))
            })
            .collect();
        let rows = self.rays.len() / self.columns.len();
        let ranges: Vec<Vec<Option<f64>>> = (0..self.columns.len())
            .into_par_iter()
            .map(|c| {
                let az = self.columns[c];
                let cand: Vec<&Aabb> = near
                    .iter()
                    .filter(|(lo, hi, _)| az >= lo - 1e-3 && az <= hi + 1e-3)
                    .map(|(_, _, b)| *b)
                    .collect();
                (0..rows)
                    .map(|r| {
                        let d = pose.rotation * self.rays[c * rows + r];
                        self.cast_among(&o, &d, cand.iter().copied())
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut noise = rng.map(|r| (r, Normal::new(0.0, self.spec.noise_sigma.max(1e-300)).unwrap()));
        let mut pts = Vec::with_capacity(ranges.len());
        for (d, r) in self.rays.iter().zip(ranges.into_iter().flatten()) {
            let Some(mut r) = r else { continue };
            if let Some((rng, n)) = noise.as_mut() {
                if self.spec.noise_sigma > 0.0 {
                    r += n.sample(*rng);
                }
            }
            pts.push(Point3::from(d * r));
        }
        PointCloud::new(pts, frame_id)
    }

    /// Scans along the path with seeded range noise, paired with true poses.
    pub fn scans(&self, seed: u64) -> impl Iterator<Item = (PointCloud, Pose)> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.poses
            .iter()
            .enumerate()
            .map(move |(i, p)| (self.scan_at(p, i as u64, Some(&mut rng)), *p))
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn layout_boxes(spec: &WorldSpec, path: &[(f64, f64, f64)]) -> Vec<Aabb> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let pts: Vec<(f64, f64)> = path.iter().step_by(4).map(|p| (p.0, p.1)).collect();
    let dist_to_path = |x: f64, y: f64| {
        pts.windows(2)
            .map(|w| point_segment_distance(x, y, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let length: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum();
    let target = (length / 100.0 * spec.box_density * 2.0).ceil() as usize;
    let mut boxes: Vec<Aabb> = Vec::with_capacity(target);
    let mut attempts = 0;
    while boxes.len() < target && attempts < target * 50 {
        attempts += 1;
        // Anchor on a random path sample, offset sideways.
        let (px, py, heading) = path[rng.random_range(0..path.len())];
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let off = rng.random_range(spec.clearance..spec.clearance + spec.band);
        let along = rng.random_range(-2.0..2.0);
        let cx = px + along * heading.cos() - side * off * heading.sin();
        let cy = py + along * heading.sin() + side * off * heading.cos();
        let pole = rng.random::<f64>() < 0.25;
        let (hx, hy, height) = if pole {
            (rng.random_range(0.15..0.4), rng.random_range(0.15..0.4), rng.random_range(3.0..7.0))
        } else {
            (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.6..8.0))
        };
        let b = Aabb {
            min: Point3::new(cx - hx, cy - hy, 0.0),
            max: Point3::new(cx + hx, cy + hy, height),
        };
        let corners = [(b.min.x, b.min.y), (b.min.x, b.max.y), (b.max.x, b.min.y), (b.max.x, b.max.y), (cx, cy)];
        if corners.iter().any(|&(x, y)| dist_to_path(x, y) < spec.clearance) {
            continue;
        }
        let overlaps = boxes.iter().any(|o| {
            o.min.x < b.max.x + 0.3 && b.min.x < o.max.x + 0.3 && o.min.y < b.max.y + 0.3 && b.min.y < o.max.y + 0.3
        });
        if !overlaps {
            boxes.push(b);
        }
    }
    boxes
}

/// Scan stream for a world spec and noise seed.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> (SyntheticWorld, Vec<(PointCloud, Pose)>) {
    let world = SyntheticWorld::new(spec);
    let scans = world.scans(seed).collect();
    (world, scans)
}
