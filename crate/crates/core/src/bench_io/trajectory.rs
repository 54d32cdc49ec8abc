use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::BenchError;
use crate::geometry::{orthonormality_error, Point3, PointCloud, Pose};

/// Frame rate assumed for KITTI pose files, which carry no stamps.
pub const KITTI_RATE_HZ: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped {
    pub frame_id: u64,
    pub stamp: f64,
    pub pose: Pose,
}

/// Poses ordered by strictly increasing frame id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Stamped>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_poses(poses: impl IntoIterator<Item = Stamped>) -> Result<Self, BenchError> {
        let mut t = Self::new();
        for p in poses {
            t.push(p.frame_id, p.stamp, p.pose)?;
        }
        Ok(t)
    }

    /// Frame ids `0..n`, stamps at `rate` Hz.
    pub fn from_sequence(poses: &[Pose], rate: f64) -> Self {
        Self {
            poses: poses
                .iter()
                .enumerate()
                .map(|(i, p)| Stamped {
                    frame_id: i as u64,
                    stamp: i as f64 / rate,
                    pose: *p,
                })
                .collect(),
        }
    }

    pub fn push(&mut self, frame_id: u64, stamp: f64, pose: Pose) -> Result<(), BenchError> {
        if let Some(last) = self.poses.last() {
            if frame_id <= last.frame_id {
                return Err(BenchError::Config(format!(
                    "trajectory frame ids must increase ({frame_id} after {})",
                    last.frame_id
                )));
            }
        }
        self.poses.push(Stamped { frame_id, stamp, pose });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Stamped] {
        &self.poses
    }

    pub fn get(&self, frame_id: u64) -> Option<&Stamped> {
        self.poses
            .binary_search_by_key(&frame_id, |p| p.frame_id)
            .ok()
            .map(|i| &self.poses[i])
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.pose.translation).collect()
    }

    /// Every pose left-multiplied by `g`.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| Stamped {
                    pose: g.compose(&p.pose),
                    ..*p
                })
                .collect(),
        }
    }

    /// Cumulative path length at each pose.
    /// Re-expresses poses of one rigidly attached frame in another:
    /// `T -> tr^-1 T tr`, where `tr` maps points of the new frame into the old.
    pub fn rebased(&self, tr: &Pose) -> Self {
        let inv = tr.inverse();
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| Stamped {
                    pose: inv.compose(&p.pose).compose(tr),
                    ..*p
                })
                .collect(),
        }
    }

    pub fn distances(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.pose.translation - self.poses[i - 1].pose.translation).norm();
            }
            d.push(acc);
        }
        d
    }

    /// `stamp tx ty tz qx qy qz qw` per line.
    pub fn write_tum(&self, mut w: impl Write) -> std::io::Result<()> {
        for p in &self.poses {
            let q = p.pose.quaternion();
            let t = p.pose.translation;
            writeln!(
                w,
                "{:.6} {} {} {} {} {} {} {}",
                p.stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    }

    /// Row-major `[R|t]`, 12 numbers per line.
    pub fn write_kitti(&self, mut w: impl Write) -> std::io::Result<()> {
        for p in &self.poses {
            let (r, t) = (p.pose.rotation, p.pose.translation);
            let row = |i: usize| format!("{} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
            writeln!(w, "{} {} {}", row(0), row(1), row(2))?;
        }
        Ok(())
    }

    /// Pairs each pose of `est` with the `self` pose of nearest stamp within
    /// `max_dt`; both outputs use the frame ids of `self`.
    pub fn associate(&self, est: &Trajectory, max_dt: f64) -> (Trajectory, Trajectory) {
        let (mut g, mut e) = (Trajectory::new(), Trajectory::new());
        let mut j = 0;
        for p in &est.poses {
            while j + 1 < self.poses.len() && self.poses[j + 1].stamp <= p.stamp {
                j += 1;
            }
            let best = [j, j + 1]
                .into_iter()
                .filter(|&k| k < self.poses.len())
                .min_by(|&a, &b| {
                    (self.poses[a].stamp - p.stamp)
                        .abs()
                        .total_cmp(&(self.poses[b].stamp - p.stamp).abs())
                });
            let Some(k) = best else { break };
            let gt = self.poses[k];
            if (gt.stamp - p.stamp).abs() > max_dt || g.poses.last().is_some_and(|l| l.frame_id >= gt.frame_id) {
                continue;
            }
            g.poses.push(gt);
            e.poses.push(Stamped { frame_id: gt.frame_id, ..*p });
        }
        (g, e)
    }

    /// Pairs `est` with `self` for evaluation: by index when the lengths
    /// agree, else by nearest stamp within `max_dt`. File frame ids are just
    /// line numbers, so they are not used.
    pub fn align(&self, est: &Trajectory, max_dt: f64) -> Result<(Trajectory, Trajectory), BenchError> {
        if est.len() == self.len() {
            let e = self.poses.iter().zip(&est.poses).map(|(g, e)| Stamped {
                frame_id: g.frame_id,
                ..*e
            });
            return Ok((self.clone(), Trajectory::from_poses(e)?));
        }
        let (g, e) = self.associate(est, max_dt);
        if g.len() < 2 {
            return Err(BenchError::Config(format!(
                "only {} poses associate within {max_dt} s",
                g.len()
            )));
        }
        Ok((g, e))
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> BenchError {
    BenchError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Little-endian `f32` quadruples `(x, y, z, reflectance)`; reflectance is
/// dropped. The frame id is taken from a numeric file stem, else 0.
pub fn load_kitti_scan(path: impl AsRef<Path>) -> Result<PointCloud, BenchError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(malformed(path, format!("{} bytes is not a multiple of 16", bytes.len())));
    }
    let mut pts = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let p = Point3::new(f(0), f(1), f(2));
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(malformed(path, format!("point {i} is not finite")));
        }
        pts.push(p);
    }
    let frame_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok(PointCloud::new(pts, frame_id))
}

pub fn write_kitti_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for x in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)
}

fn numbers(line: &str) -> Option<Vec<f64>> {
    line.split_whitespace().map(|t| t.parse::<f64>().ok()).collect()
}

/// A row-major 3x4 `[R|t]` with R orthonormal within 1e-4.
fn kitti_pose(path: &Path, line: usize, v: &[f64]) -> Result<Pose, BenchError> {
    if v.len() != 12 {
        return Err(malformed(path, format!("line {line}: {} values, expected 12", v.len())));
    }
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let err = orthonormality_error(&r);
    if !(err <= 1e-4) || r.determinant() <= 0.0 {
        return Err(malformed(path, format!("line {line}: rotation not orthonormal ({err:.2e})")));
    }
    // Re-orthonormalize: the file's 1e-4 tolerance is looser than Pose's.
    let svd = r.svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    Pose::new(r, Vector3::new(v[3], v[7], v[11])).map_err(|e| malformed(path, e.to_string()))
}

fn parse_kitti(path: &Path, text: &str) -> Result<Trajectory, BenchError> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v = numbers(line).ok_or_else(|| malformed(path, format!("line {}: not numeric", n + 1)))?;
        poses.push(kitti_pose(path, n + 1, &v)?);
    }
    Ok(Trajectory::from_sequence(&poses, KITTI_RATE_HZ))
}

/// The `Tr:` entry of a KITTI `calib.txt`: LIDAR to left-camera transform.
pub fn load_kitti_calib(path: impl AsRef<Path>) -> Result<Pose, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            let v = numbers(rest).ok_or_else(|| malformed(path, format!("line {}: not numeric", n + 1)))?;
            return kitti_pose(path, n + 1, &v);
        }
    }
    Err(malformed(path, "no Tr: entry"))
}

fn parse_tum(path: &Path, text: &str) -> Result<Trajectory, BenchError> {
    let mut t = Trajectory::new();
    let mut id = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = numbers(line).ok_or_else(|| malformed(path, format!("line {}: not numeric", n + 1)))?;
        if v.len() != 8 {
            return Err(malformed(path, format!("line {}: {} values, expected 8", n + 1, v.len())));
        }
        let qn = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if !((qn - 1.0).abs() <= 1e-4) {
            return Err(malformed(path, format!("line {}: quaternion norm {qn}", n + 1)));
        }
        let pose = Pose::from_xyzw(Vector3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7]);
        if let Some(last) = t.poses.last() {
            if v[0] <= last.stamp {
                return Err(malformed(path, format!("line {}: stamps must increase", n + 1)));
            }
        }
        t.poses.push(Stamped {
            frame_id: id,
            stamp: v[0],
            pose,
        });
        id += 1;
    }
    Ok(t)
}

/// KITTI pose file: one row-major 3x4 `[R|t]` per line, rotation
/// orthonormal within 1e-4.
pub fn load_kitti_poses(path: impl AsRef<Path>) -> Result<Trajectory, BenchError> {
    let path = path.as_ref();
    parse_kitti(path, &fs::read_to_string(path)?)
}

pub fn load_tum(path: impl AsRef<Path>) -> Result<Trajectory, BenchError> {
    let path = path.as_ref();
    parse_tum(path, &fs::read_to_string(path)?)
}

/// KITTI or TUM, decided by the number of values on the first data line.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().count());
    match first {
        Some(12) => parse_kitti(path, &text),
        Some(8) => parse_tum(path, &text),
        None => Ok(Trajectory::new()),
        Some(n) => Err(malformed(path, format!("{n} values per line is neither KITTI (12) nor TUM (8)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_scan_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("000007.bin");
        let rec: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5].iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&p, &rec).unwrap();
        let c = load_kitti_scan(&p).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(c.frame_id, 7);
        fs::write(&p, []).unwrap();
        assert!(load_kitti_scan(&p).unwrap().is_empty());
        fs::write(&p, [0u8; 17]).unwrap();
        assert!(matches!(load_kitti_scan(&p), Err(BenchError::MalformedFile { .. })));
        let nan: Vec<u8> = [f32::NAN, 0.0, 0.0, 0.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&p, nan).unwrap();
        assert!(load_kitti_scan(&p).is_err());
        assert!(matches!(load_kitti_scan(dir.path().join("missing.bin")), Err(BenchError::Io(_))));
    }

    #[test]
    fn calibration_rebases_camera_poses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.txt");
        // KITTI's axis swap: LIDAR x forward is camera z.
        fs::write(&p, "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27\n").unwrap();
        let tr = load_kitti_calib(&p).unwrap();
        assert!((tr.apply(&Point3::new(1.0, 0.0, 0.0)) - Point3::new(0.0, -0.08, 0.73)).norm() < 1e-12);
        // Camera moving 2 m along its z axis is the LIDAR moving 2 m along x.
        let cam = Trajectory::from_sequence(&[Pose::identity(), Pose::from_translation(Vector3::new(0.0, 0.0, 2.0))], 10.0);
        let velo = cam.rebased(&tr);
        assert!(velo.poses()[0].pose.max_abs_diff(&Pose::identity()) < 1e-12);
        assert!((velo.poses()[1].pose.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        fs::write(&p, "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(load_kitti_calib(&p).is_err());
    }

    #[test]
    fn kitti_pose_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("00.txt");
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 2 0 1 0 -1 0 0 1 0.5\n").unwrap();
        let t = load_kitti_poses(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.poses()[0].pose, Pose::identity());
        assert_eq!(t.poses()[1].pose.translation, Vector3::new(2.0, -1.0, 0.5));
        fs::write(&p, "1 0 0 0 0 1.01 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(load_kitti_poses(&p), Err(BenchError::MalformedFile { .. })));
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(load_kitti_poses(&p).is_err());
    }

    #[test]
    fn formats_round_trip_and_autodetect() {
        let dir = tempfile::tempdir().unwrap();
        let poses: Vec<Pose> = (0..5)
            .map(|i| Pose::from_yaw(0.3 * i as f64, Vector3::new(i as f64, 0.5 * i as f64, 0.1)))
            .collect();
        let t = Trajectory::from_sequence(&poses, KITTI_RATE_HZ);
        let (k, m) = (dir.path().join("k.txt"), dir.path().join("t.txt"));
        let mut buf = Vec::new();
        t.write_kitti(&mut buf).unwrap();
        fs::write(&k, &buf).unwrap();
        buf.clear();
        t.write_tum(&mut buf).unwrap();
        fs::write(&m, &buf).unwrap();
        for path in [&k, &m] {
            let back = load_trajectory(path).unwrap();
            assert_eq!(back.len(), 5);
            for (a, b) in back.poses().iter().zip(t.poses()) {
                assert_eq!(a.frame_id, b.frame_id);
                assert!(a.pose.max_abs_diff(&b.pose) < 1e-12);
                assert!((a.stamp - b.stamp).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn align_by_index_then_stamp() {
        let poses: Vec<Pose> = (0..20).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
        let gt = Trajectory::from_sequence(&poses, 10.0);
        let (g, e) = gt.align(&gt.clone(), 0.01).unwrap();
        assert_eq!((g.len(), e.len()), (20, 20));
        let sub = Trajectory::from_poses(gt.poses().iter().step_by(3).enumerate().map(|(k, p)| Stamped {
            frame_id: k as u64,
            ..*p
        }))
        .unwrap();
        let (g, e) = gt.align(&sub, 0.01).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(e.poses()[2].frame_id, 6);
        assert_eq!(g.poses()[2].pose, e.poses()[2].pose);
        assert!(gt.align(&Trajectory::new(), 0.01).is_err());
    }

    #[test]
    fn association_by_stamp() {
        let poses: Vec<Pose> = (0..10).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
        let gt = Trajectory::from_sequence(&poses, 10.0);
        let mut est = Trajectory::new();
        for i in [1u64, 2, 5, 9] {
            est.push(100 + i, i as f64 / 10.0 + 1e-4, poses[i as usize]).unwrap();
        }
        let (g, e) = gt.associate(&est, 0.01);
        let ids: Vec<u64> = e.poses().iter().map(|p| p.frame_id).collect();
        assert_eq!(ids, vec![1, 2, 5, 9]);
        assert_eq!(g.poses()[2].pose, poses[5]);
    }

    #[test]
    fn frame_ids_must_increase() {
        let mut t = Trajectory::new();
        t.push(3, 0.0, Pose::identity()).unwrap();
        assert!(t.push(3, 0.1, Pose::identity()).is_err());
    }
}
