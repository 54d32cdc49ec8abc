//! Frame-to-frame pose estimation from rasterized scans, keyframe
//! selection, odometry-prior fusion and relocalization.

mod icp;
mod reloc;
mod rigid;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    detect, match_with_points, ransac_filter, DetectorConfig, FeatureError, FeatureSet,
    MatchConfig, RansacConfig,
};
use crate::geometry::{Intrinsics, Point3, PointCloud, Pose};
use crate::optim::{fuse_two_poses, OptimError};
use crate::raster::{
    default_extrinsics, rasterize, remove_ground_plane, ElevationEncoding, GroundRansacConfig,
    RasterError, RasterImage,
};

pub use icp::{refine_icp, IcpConfig, IcpTarget, PointGrid};
pub use reloc::{relocalize, RelocConfig, Relocalization};
pub use rigid::estimate_rigid_transform;

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("correspondences are degenerate (fewer than 3 or collinear)")]
    DegenerateConfiguration,
    #[error("tracking lost: {0}")]
    TrackingLost(String),
    #[error("relocalization failed: {0}")]
    RelocalizationFailed(String),
    #[error("malformed odometry prior: {0}")]
    MalformedPrior(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: u64,
    pub frame_id: u64,
    /// Body (LIDAR) frame in world coordinates.
    pub pose: Pose,
    /// Feature points are stored in the body frame.
    pub features: FeatureSet,
    /// Ground-free, voxel-downsampled scan in the body frame.
    pub dense: Vec<Point3>,
    pub stamp: f64,
    pub local_map_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackMode {
    Tracking,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub mode: TrackMode,
    pub last_pose: Pose,
    pub frames_since_kf: u32,
    /// Registration inliers against the previous frame.
    pub shared_with_last_kf: usize,
}

impl Default for TrackState {
    fn default() -> Self {
        Self {
            mode: TrackMode::Tracking,
            last_pose: Pose::identity(),
            frames_since_kf: 0,
            shared_with_last_kf: 0,
        }
    }
}

/// Relative motion between consecutive frames from an external source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomPrior {
    /// `T_{k-1}^{-1} T_k` in the body frame.
    pub relative_pose: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub intrinsics: Intrinsics,
    /// Body-to-camera transform of the virtual camera.
    pub extrinsics: Pose,
    pub encoding: ElevationEncoding,
    pub ground: GroundRansacConfig,
    pub detector: DetectorConfig,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub min_track: usize,
    pub kf_min_frames: u32,
    pub kf_min_shared: usize,
    /// A keyframe is forced after this many frames even when the shared
    /// count has fallen below `kf_min_shared`.
    pub kf_max_frames: u32,
    /// Isotropic information of the scan-registration factor.
    pub icp_weight: f64,
    pub dense_voxel: f64,
    /// Dense refinement of the frame-to-frame motion.
    pub icp: IcpConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::default(),
            extrinsics: default_extrinsics(),
            encoding: ElevationEncoding::default(),
            ground: GroundRansacConfig::default(),
            detector: DetectorConfig::default(),
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            min_track: 30,
            kf_min_frames: 5,
            kf_min_shared: 100,
            kf_max_frames: 15,
            icp_weight: 1.0,
            dense_voxel: 0.05,
            icp: IcpConfig::default(),
        }
    }
}

/// A scan after ground removal, rasterization and feature extraction.
#[derive(Debug, Clone)]
pub struct ProcessedScan {
    pub frame_id: u64,
    pub image: RasterImage,
    /// Feature points in the body frame.
    pub features: FeatureSet,
    pub dense: Vec<Point3>,
    /// Whole scan, ground included, at the ICP voxel.
    pub icp_cloud: Vec<Point3>,
}

/// Keeps the first point falling in each cubic voxel.
pub fn voxel_downsample(points: &[Point3], voxel: f64) -> Vec<Point3> {
    if voxel <= 0.0 {
        return points.to_vec();
    }
    let mut seen = HashSet::new();
    points
        .iter()
        .filter(|p| {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            seen.insert(key)
        })
        .copied()
        .collect()
}

pub fn preprocess(cloud: &PointCloud, cfg: &TrackerConfig) -> Result<ProcessedScan, OdometryError> {
    let ground = GroundRansacConfig {
        seed: cfg.ground.seed ^ cloud.frame_id,
        ..cfg.ground
    };
    let (objects, _) = remove_ground_plane(cloud, &ground)?;
    let image = rasterize(&objects, &cfg.extrinsics, &cfg.intrinsics, &cfg.encoding)?;
    let mut features = detect(&image, &cfg.detector)?;
    let to_body = cfg.extrinsics.inverse();
    for p in features.points3d.iter_mut().flatten() {
        *p = to_body.apply(p);
    }
    Ok(ProcessedScan {
        frame_id: cloud.frame_id,
        image,
        features,
        dense: voxel_downsample(&objects.points, cfg.dense_voxel),
        icp_cloud: voxel_downsample(&cloud.points, cfg.icp.voxel),
    })
}

/// Motion taking body points of `cur` into the body frame of `prev`, and
/// the number of RANSAC inliers supporting it.
pub fn register(
    prev: &FeatureSet,
    cur: &FeatureSet,
    cfg: &TrackerConfig,
) -> Result<(Pose, usize), OdometryError> {
    let (matches, p_prev, p_cur) = match_with_points(prev, cur, &cfg.matching);
    if matches.len() < cfg.min_track {
        return Err(OdometryError::TrackingLost(format!(
            "{} matches, need {}",
            matches.len(),
            cfg.min_track
        )));
    }
    let inliers = match ransac_filter(&matches, &p_cur, &p_prev, &cfg.ransac) {
        Ok(m) => m,
        Err(FeatureError::NoConsensus { found, .. }) => {
            return Err(OdometryError::TrackingLost(format!("no consensus ({found} inliers)")))
        }
        Err(e) => return Err(e.into()),
    };
    let kept: HashSet<_> = inliers.pairs.iter().collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, m) in matches.pairs.iter().enumerate() {
        if kept.contains(m) {
            a.push(p_cur[k]);
            b.push(p_prev[k]);
        }
    }
    Ok((estimate_rigid_transform(&a, &b)?, a.len()))
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: Pose,
    pub relative: Pose,
    pub inliers: usize,
    pub scan: ProcessedScan,
}

/// Registers `cloud` against the previous frame and, when a prior is given,
/// fuses the two relative-motion estimates.
pub fn track(
    prev: &FeatureSet,
    prev_pose: &Pose,
    cloud: &PointCloud,
    prior: Option<&OdomPrior>,
    cfg: &TrackerConfig,
) -> Result<TrackResult, OdometryError> {
    let scan = preprocess(cloud, cfg).map_err(|e| match e {
        OdometryError::Features(FeatureError::TooFewFeatures { found, .. }) => {
            OdometryError::TrackingLost(format!("only {found} features"))
        }
        other => other,
    })?;
    let (t_icp, inliers) = register(prev, &scan.features, cfg)?;
    let relative = fuse_with_prior(&t_icp, prior, cfg)?;
    Ok(TrackResult {
        pose: prev_pose.compose(&relative),
        relative,
        inliers,
        scan,
    })
}

fn fuse_with_prior(t_icp: &Pose, prior: Option<&OdomPrior>, cfg: &TrackerConfig) -> Result<Pose, OdometryError> {
    match prior {
        None => Ok(*t_icp),
        Some(p) => Ok(fuse_two_poses(
            t_icp,
            &(Matrix6::identity() * cfg.icp_weight),
            &p.relative_pose,
            &p.information,
        )?),
    }
}

pub fn select_keyframe(state: &TrackState, shared_points: usize) -> bool {
    select_keyframe_with(state, shared_points, 5, 100)
}

fn select_keyframe_with(state: &TrackState, shared: usize, min_frames: u32, min_shared: usize) -> bool {
    state.frames_since_kf >= min_frames && shared >= min_shared
}

/// What the tracker produced for one input scan.
#[derive(Debug, Clone)]
pub enum FrameOutcome {
    Tracked {
        pose: Pose,
        keyframe: Option<Keyframe>,
    },
    /// Tracking is lost; the scan is handed back for relocalization.
    Lost { scan: ProcessedScan, reason: String },
}

/// Sequential tracking state machine.
#[derive(Debug)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub state: TrackState,
    last_frame: Option<FeatureSet>,
    last_target: IcpTarget,
    last_kf: Option<Keyframe>,
    next_kf_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            state: TrackState::default(),
            last_frame: None,
            last_target: IcpTarget::default(),
            last_kf: None,
            next_kf_id: 0,
        }
    }

    pub fn last_keyframe(&self) -> Option<&Keyframe> {
        self.last_kf.as_ref()
    }

    fn make_keyframe(&mut self, scan: &ProcessedScan, pose: Pose, stamp: f64) -> Keyframe {
        let kf = Keyframe {
            id: self.next_kf_id,
            frame_id: scan.frame_id,
            pose,
            features: scan.features.clone(),
            dense: scan.dense.clone(),
            stamp,
            local_map_id: None,
        };
        self.next_kf_id += 1;
        self.state.frames_since_kf = 0;
        self.state.shared_with_last_kf = kf.features.lifted_count();
        self.last_kf = Some(kf.clone());
        kf
    }

    fn set_last(&mut self, scan: &ProcessedScan) {
        self.last_frame = Some(scan.features.clone());
        if self.cfg.icp.iterations > 0 {
            self.last_target = IcpTarget::new(&scan.icp_cloud, self.cfg.icp.normal_radius);
        }
    }

    fn lose(&mut self, scan: ProcessedScan, reason: String) -> FrameOutcome {
        log::warn!("frame {}: tracking lost ({reason})", scan.frame_id);
        self.state.mode = TrackMode::Lost;
        FrameOutcome::Lost { scan, reason }
    }

    /// Processes one scan. The first scan becomes keyframe 0 at `initial`.
    pub fn process(
        &mut self,
        cloud: &PointCloud,
        stamp: f64,
        prior: Option<&OdomPrior>,
        initial: &Pose,
    ) -> Result<FrameOutcome, OdometryError> {
        let scan = match preprocess(cloud, &self.cfg) {
            Ok(s) => s,
            Err(OdometryError::Features(FeatureError::TooFewFeatures { found, .. }))
                if self.last_frame.is_some() =>
            {
                self.state.mode = TrackMode::Lost;
                return Err(OdometryError::TrackingLost(format!("only {found} features")));
            }
            Err(e) => return Err(e),
        };
        let Some(prev) = self.last_frame.as_ref() else {
            self.state = TrackState {
                last_pose: *initial,
                ..TrackState::default()
            };
            self.set_last(&scan);
            let kf = self.make_keyframe(&scan, *initial, stamp);
            return Ok(FrameOutcome::Tracked {
                pose: *initial,
                keyframe: Some(kf),
            });
        };
        if self.state.mode == TrackMode::Lost {
            return Ok(FrameOutcome::Lost {
                scan,
                reason: "awaiting relocalization".into(),
            });
        }
        let (t_feat, shared) = match register(prev, &scan.features, &self.cfg) {
            Ok(r) => r,
            Err(OdometryError::TrackingLost(reason)) => return Ok(self.lose(scan, reason)),
            Err(e) => return Err(e),
        };
        let t_icp = refine_icp(&self.last_target, &scan.icp_cloud, &t_feat, &self.cfg.icp).map_or(t_feat, |r| r.0);
        let relative = fuse_with_prior(&t_icp, prior, &self.cfg)?;
        let pose = self.state.last_pose.compose(&relative);
        self.state.last_pose = pose;
        self.state.frames_since_kf += 1;
        self.state.shared_with_last_kf = shared;
        self.set_last(&scan);

        // Points in common with the last frame: inliers of this registration.
        let chosen = select_keyframe_with(&self.state, shared, self.cfg.kf_min_frames, self.cfg.kf_min_shared);
        let mut keyframe = None;
        if chosen || self.state.frames_since_kf >= self.cfg.kf_max_frames {
            keyframe = Some(self.make_keyframe(&scan, pose, stamp));
        }
        Ok(FrameOutcome::Tracked { pose, keyframe })
    }

    /// Resumes tracking from a relocalized pose; the scan becomes a keyframe.
    pub fn resume(&mut self, scan: &ProcessedScan, pose: Pose, stamp: f64) -> Keyframe {
        self.state.mode = TrackMode::Tracking;
        self.state.last_pose = pose;
        self.set_last(scan);
        self.make_keyframe(scan, pose, stamp)
    }

    /// Replaces the current pose estimate, e.g. after a loop correction.
    pub fn correct(&mut self, last_pose: Pose, last_kf_pose: Option<Pose>) {
        self.state.last_pose = last_pose;
        if let (Some(kf), Some(p)) = (self.last_kf.as_mut(), last_kf_pose) {
            kf.pose = p;
        }
    }
}

/// Parses `frame_id tx ty tz qx qy qz qw w` lines; information is `w * I`.
pub fn parse_odom_priors(text: &str) -> Result<HashMap<u64, OdomPrior>, OdometryError> {
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| OdometryError::MalformedPrior(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(bad("expected 9 fields"));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad("frame id"))?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("number"))?;
        if v.iter().any(|x| !x.is_finite()) || v[7] < 0.0 {
            return Err(bad("non-finite value or negative weight"));
        }
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if qn < 1e-9 {
            return Err(bad("zero quaternion"));
        }
        let pose = Pose::from_xyzw(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6]);
        out.insert(
            id,
            OdomPrior {
                relative_pose: pose,
                information: Matrix6::identity() * v[7],
            },
        );
    }
    Ok(out)
}

pub fn read_odom_priors(path: &Path) -> Result<HashMap<u64, OdomPrior>, OdometryError> {
    parse_odom_priors(&std::fs::read_to_string(path)?)
}
