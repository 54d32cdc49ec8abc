//! Local-map accumulation and finalization, and the life-long map graph
//! with loop-driven replacement, distance culling and an offline archive.

mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{detect, hamming, BinaryDescriptor, FeatureError, FeatureSet};
use crate::geometry::{Point3, PointCloud, Pose};
use crate::odometry::{Keyframe, TrackerConfig};
use crate::optim::{local_bundle_adjust, BaProblem, LmConfig, Observation, SolverKind};
use crate::raster::{rasterize, RasterImage};

pub use store::{decode_local_map, encode_local_map, ArchiveEntry, OfflineStore};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("keyframe {kf} is not newer than the map's last keyframe {last}")]
    StaleKeyframe { kf: u64, last: u64 },
    #[error("local map {0} is not finalized")]
    NotFinalized(u64),
    #[error("local map {0} was already inserted")]
    DuplicateId(u64),
    #[error("local map {0} is not online")]
    UnknownMatchedId(u64),
    #[error("local bundle adjustment failed: {reason}")]
    FinalizeFailed { reason: String, map: Box<LocalMap> },
    #[error("archive: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub kfs_per_map: usize,
    pub fusion_radius: f64,
    pub fusion_max_hamming: u32,
    /// Distance lag after which an online map is archived, meters.
    pub d_th: f64,
    pub overlap_min: usize,
    /// Leading keyframes held fixed in local BA.
    pub ba_fixed: usize,
    pub huber_px: Option<f64>,
    pub lm: LmConfig,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            kfs_per_map: 5,
            fusion_radius: 0.3,
            fusion_max_hamming: 64,
            d_th: 100.0,
            overlap_min: 20,
            ba_fixed: 2,
            huber_px: Some(2.0),
            lm: LmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapObservation {
    pub keyframe_id: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    /// World frame.
    pub position: Point3,
    pub descriptor: BinaryDescriptor,
    pub observations: Vec<MapObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMap {
    pub id: u64,
    pub keyframe_ids: Vec<u64>,
    pub keyframes: Vec<Keyframe>,
    pub map_points: Vec<MapPoint>,
    /// Present iff the map is finalized.
    pub image: Option<RasterImage>,
    /// Features of the map image, points in the anchor body frame.
    pub image_features: FeatureSet,
    pub stamp: f64,
    pub anchor_pose: Pose,
}

impl LocalMap {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            keyframe_ids: Vec::new(),
            keyframes: Vec::new(),
            map_points: Vec::new(),
            image: None,
            image_features: FeatureSet::default(),
            stamp: 0.0,
            anchor_pose: Pose::identity(),
        }
    }

    pub fn is_finalized(&self) -> bool {
        self.image.is_some()
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    /// Number of map points also present (same position) in `other`.
    pub fn shared_points(&self, other: &LocalMap) -> usize {
        let shared: BTreeSet<u64> = self
            .keyframe_ids
            .iter()
            .filter(|id| other.keyframe_ids.contains(id))
            .copied()
            .collect();
        self.map_points
            .iter()
            .filter(|p| p.observations.iter().any(|o| shared.contains(&o.keyframe_id)))
            .count()
    }
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Point3, r: f64) -> Cell {
    ((p.x / r).floor() as i64, (p.y / r).floor() as i64, (p.z / r).floor() as i64)
}

/// Adds a keyframe's lifted features to the map, fusing those that land
/// within `fusion_radius` of a compatible existing point. Returns `true`
/// (the finalize signal) once the map holds `kfs_per_map` keyframes.
pub fn accumulate(map: &mut LocalMap, kf: &Keyframe, cfg: &MappingConfig) -> Result<bool, MappingError> {
    if let Some(&last) = map.keyframe_ids.last() {
        if kf.id <= last {
            return Err(MappingError::StaleKeyframe { kf: kf.id, last });
        }
    }
    if map.keyframes.is_empty() {
        map.anchor_pose = kf.pose;
    }
    let r = cfg.fusion_radius;
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in map.map_points.iter().enumerate() {
        grid.entry(cell_of(&p.position, r)).or_default().push(i);
    }
    for i in 0..kf.features.len() {
        let Some(body) = kf.features.points3d[i] else {
            continue;
        };
        let world = kf.pose.apply(&body);
        let desc = kf.features.descriptors[i];
        let c = cell_of(&world, r);
        let mut best: Option<(f64, u32, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                        continue;
                    };
                    for &j in ids {
                        let mp = &map.map_points[j];
                        let d = (mp.position - world).norm();
                        let h = hamming(&mp.descriptor, &desc);
                        if d > r || h > cfg.fusion_max_hamming {
                            continue;
                        }
                        if mp.observations.iter().any(|o| o.keyframe_id == kf.id) {
                            continue;
                        }
                        if best.is_none_or(|(bd, bh, _)| (d, h) < (bd, bh)) {
                            best = Some((d, h, j));
                        }
                    }
                }
            }
        }
        let corner = &kf.features.corners[i];
        let obs = MapObservation {
            keyframe_id: kf.id,
            u: corner.u,
            v: corner.v,
        };
        match best {
            Some((_, _, j)) => {
                let mp = &mut map.map_points[j];
                let n = mp.observations.len() as f64;
                mp.position = Point3::from((mp.position.coords * n + world.coords) / (n + 1.0));
                mp.observations.push(obs);
            }
            None => {
                grid.entry(c).or_default().push(map.map_points.len());
                map.map_points.push(MapPoint {
                    position: world,
                    descriptor: desc,
                    observations: vec![obs],
                });
            }
        }
    }
    map.keyframe_ids.push(kf.id);
    map.keyframes.push(kf.clone());
    Ok(map.keyframes.len() >= cfg.kfs_per_map)
}

/// Local BA problem over the map's keyframes and multiply observed points.
/// Returns the problem and the map-point index of each BA point.
pub fn ba_problem(map: &LocalMap, cfg: &MappingConfig, sensor: &TrackerConfig) -> (BaProblem, Vec<usize>) {
    let poses: BTreeMap<u64, Pose> = map.keyframes.iter().map(|k| (k.id, k.pose)).collect();
    let fixed = map.keyframe_ids.iter().take(cfg.ba_fixed.max(1)).copied().collect();
    let mut points = Vec::new();
    let mut index = Vec::new();
    let mut observations = Vec::new();
    for (i, mp) in map.map_points.iter().enumerate() {
        if mp.observations.len() < 2 {
            continue;
        }
        let pid = points.len();
        points.push(mp.position);
        index.push(i);
        for o in &mp.observations {
            observations.push(Observation::new(o.keyframe_id, pid, o.u, o.v));
        }
    }
    let prob = BaProblem {
        poses,
        points,
        observations,
        intrinsics: sensor.intrinsics,
        extrinsics: sensor.extrinsics,
        fixed,
        huber: cfg.huber_px,
        solver: SolverKind::Auto,
    };
    (prob, index)
}

/// Map points and member scans in the anchor body frame, rasterized from the
/// anchor's virtual camera.
pub fn render_map(map: &LocalMap, sensor: &TrackerConfig) -> Option<RasterImage> {
    let to_anchor = map.anchor_pose.inverse();
    let mut pts: Vec<Point3> = map.map_points.iter().map(|p| to_anchor.apply(&p.position)).collect();
    for kf in &map.keyframes {
        let rel = to_anchor.compose(&kf.pose);
        pts.extend(kf.dense.iter().map(|p| rel.apply(p)));
    }
    rasterize(&PointCloud::new(pts, map.id), &sensor.extrinsics, &sensor.intrinsics, &sensor.encoding).ok()
}

fn finish(mut map: LocalMap, sensor: &TrackerConfig) -> LocalMap {
    let image = render_map(&map, sensor)
        .unwrap_or_else(|| RasterImage::blank(sensor.intrinsics.width, sensor.intrinsics.height, map.id));
    let mut features = match detect(&image, &sensor.detector) {
        Ok(f) => f,
        Err(FeatureError::TooFewFeatures { .. }) | Err(FeatureError::ImageTooSmall { .. }) => FeatureSet::default(),
        Err(e) => {
            log::warn!("map {}: feature extraction failed: {e}", map.id);
            FeatureSet::default()
        }
    };
    let to_body = sensor.extrinsics.inverse();
    for p in features.points3d.iter_mut().flatten() {
        *p = to_body.apply(p);
    }
    map.stamp = map.keyframes.last().map_or(0.0, |k| k.stamp);
    map.image = Some(image);
    map.image_features = features;
    // Member scans are only needed for the image.
    for kf in &mut map.keyframes {
        kf.dense = Vec::new();
    }
    map
}

/// Runs local BA, then rasterizes the optimized map from its anchor camera.
/// Already finalized maps are returned unchanged.
pub fn finalize(map: &LocalMap, cfg: &MappingConfig, sensor: &TrackerConfig) -> Result<LocalMap, MappingError> {
    if map.is_finalized() {
        return Ok(map.clone());
    }
    let mut out = map.clone();
    let (prob, index) = ba_problem(map, cfg, sensor);
    if !prob.observations.is_empty() {
        match local_bundle_adjust(&prob, &cfg.lm) {
            Ok(res) => {
                for (pid, &mi) in index.iter().enumerate() {
                    out.map_points[mi].position = res.points[pid];
                }
                for kf in &mut out.keyframes {
                    kf.pose = res.poses[&kf.id];
                }
                out.anchor_pose = out.keyframes[0].pose;
            }
            Err(e) => {
                log::warn!("map {}: local BA failed ({e}); keeping unoptimized geometry", map.id);
                return Err(MappingError::FinalizeFailed {
                    reason: e.to_string(),
                    map: Box::new(finish(out, sensor)),
                });
            }
        }
    }
    Ok(finish(out, sensor))
}

/// Online local maps with their keyframe/time labels and adjacency.
#[derive(Debug, Clone, Default)]
pub struct LocalMapGraph {
    pub online: BTreeMap<u64, LocalMap>,
    pub edges: BTreeSet<(u64, u64)>,
    /// Distance traveled when each online map was inserted.
    pub inserted_at: BTreeMap<u64, f64>,
    pub total_distance: f64,
    inserted_ids: BTreeSet<u64>,
}

impl LocalMapGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn online_count(&self) -> usize {
        self.online.len()
    }

    /// Number of maps ever inserted.
    pub fn finalized_total(&self) -> usize {
        self.inserted_ids.len()
    }

    pub fn insert(&mut self, lm: LocalMap) -> Result<(), MappingError> {
        if !lm.is_finalized() {
            return Err(MappingError::NotFinalized(lm.id));
        }
        if self.inserted_ids.contains(&lm.id) {
            return Err(MappingError::DuplicateId(lm.id));
        }
        for (id, other) in &self.online {
            if other.keyframe_ids.iter().any(|k| lm.keyframe_ids.contains(k)) {
                self.edges.insert((*id.min(&lm.id), *id.max(&lm.id)));
            }
        }
        self.inserted_ids.insert(lm.id);
        self.inserted_at.insert(lm.id, self.total_distance);
        self.online.insert(lm.id, lm);
        Ok(())
    }

    fn take(&mut self, id: u64) -> Option<LocalMap> {
        let lm = self.online.remove(&id)?;
        self.inserted_at.remove(&id);
        self.edges.retain(|&(a, b)| a != id && b != id);
        Some(lm)
    }

    /// Replaces the online map at a revisited place by `new_lm`, archiving
    /// the old one.
    pub fn update_on_loop(
        &mut self,
        store: &mut OfflineStore,
        new_lm: LocalMap,
        matched_id: u64,
    ) -> Result<(), MappingError> {
        if !self.online.contains_key(&matched_id) {
            return Err(MappingError::UnknownMatchedId(matched_id));
        }
        if !new_lm.is_finalized() {
            return Err(MappingError::NotFinalized(new_lm.id));
        }
        if self.inserted_ids.contains(&new_lm.id) {
            return Err(MappingError::DuplicateId(new_lm.id));
        }
        store.archive(&self.online[&matched_id])?;
        self.take(matched_id);
        self.insert(new_lm)
    }

    /// Archives online maps inserted more than `d_th` meters ago.
    pub fn cull(&mut self, store: &mut OfflineStore, traveled: f64, cfg: &MappingConfig) -> Result<usize, MappingError> {
        self.total_distance = traveled;
        let old: Vec<u64> = self
            .inserted_at
            .iter()
            .filter(|(_, &at)| traveled - at > cfg.d_th)
            .map(|(&id, _)| id)
            .collect();
        for &id in &old {
            store.archive(&self.online[&id])?;
            self.take(id);
        }
        Ok(old.len())
    }
}
