use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::geometry::Pose;
use crate::mapping::LocalMap;
use crate::odometry::{register, Keyframe, TrackerConfig};
use crate::place_recognition::LoopCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Bow,
    LocalMaps,
    Keyframes,
}

impl SearchMode {
    pub const ALL: [SearchMode; 3] = [SearchMode::Bow, SearchMode::LocalMaps, SearchMode::Keyframes];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Bow => "bow",
            SearchMode::LocalMaps => "localmaps",
            SearchMode::Keyframes => "keyframes",
        }
    }
}

impl FromStr for SearchMode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bow" => Ok(SearchMode::Bow),
            "localmaps" => Ok(SearchMode::LocalMaps),
            "keyframes" => Ok(SearchMode::Keyframes),
            other => Err(BenchError::Config(format!("unknown search mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Candidates must lie within this distance of the current estimate.
    pub radius: f64,
    pub recent_kf: u64,
    pub min_inliers: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            radius: 15.0,
            recent_kf: 30,
            min_inliers: 30,
        }
    }
}

/// Loop search without the BOW database: gate candidates by distance to the
/// current pose estimate, then match features against every survivor and
/// keep the one with most inliers. `keyframes` and `maps` carry estimated
/// poses. `SearchMode::Bow` is not a baseline and returns `None`.
pub fn baseline_loop_search(
    mode: SearchMode,
    kf: &Keyframe,
    estimate: &Pose,
    keyframes: &[Keyframe],
    maps: &[LocalMap],
    sensor: &TrackerConfig,
    cfg: &BaselineConfig,
) -> Option<LoopCandidate> {
    let near = |p: &Pose| (p.translation - estimate.translation).norm() <= cfg.radius;
    let old = |id: u64| kf.id.abs_diff(id) > cfg.recent_kf;
    // (map id, matched keyframe id, features)
    let cands: Vec<(u64, u64, &crate::features::FeatureSet)> = match mode {
        SearchMode::Bow => return None,
        SearchMode::Keyframes => keyframes
            .iter()
            .filter(|k| old(k.id) && near(&k.pose))
            .map(|k| {
                let map = k
                    .local_map_id
                    .or_else(|| maps.iter().find(|m| m.keyframe_ids.contains(&k.id)).map(|m| m.id))
                    .unwrap_or(u64::MAX);
                (map, k.id, &k.features)
            })
            .collect(),
        SearchMode::LocalMaps => maps
            .iter()
            .filter(|m| !m.keyframe_ids.is_empty() && m.keyframe_ids.iter().all(|&k| old(k)) && near(&m.anchor_pose))
            .map(|m| (m.id, m.keyframe_ids[0], &m.image_features))
            .collect(),
    };
    let mut best: Option<LoopCandidate> = None;
    for (map, kid, feats) in cands {
        let Ok((rel, n)) = register(feats, &kf.features, sensor) else {
            continue;
        };
        if n >= cfg.min_inliers && best.as_ref().is_none_or(|b| n > b.inliers) {
            best = Some(LoopCandidate {
                query_keyframe_id: kf.id,
                local_map_id: map,
                score: 0.0,
                matched_keyframe_id: Some(kid),
                inliers: n,
                relative_pose: Some(rel),
            });
        }
    }
    best
}
