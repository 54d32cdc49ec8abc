use serde::{Deserialize, Serialize};

use super::{OdometryError, TrackerConfig};
use crate::features::FeatureSet;
use crate::geometry::Pose;
use crate::mapping::{LocalMapGraph, OfflineStore};
use crate::place_recognition::{map_members, verify_members, PlaceRecognizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelocConfig {
    pub score_min: f64,
    pub min_inliers: usize,
    pub max_candidates: usize,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self {
            score_min: 0.15,
            min_inliers: 30,
            max_candidates: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relocalization {
    pub pose: Pose,
    /// The query in the matched keyframe's body frame.
    pub relative: Pose,
    pub keyframe_id: u64,
    pub local_map_id: u64,
    pub inliers: usize,
}

/// Recovers a world pose for a lost frame from the BOW database: the pose is
/// the matched keyframe's pose composed with the registered relative motion.
pub fn relocalize(
    cur: &FeatureSet,
    recognizer: &PlaceRecognizer,
    graph: &LocalMapGraph,
    store: Option<&OfflineStore>,
    sensor: &TrackerConfig,
    cfg: &RelocConfig,
) -> Result<Relocalization, OdometryError> {
    let ranked = recognizer.query(cur, cfg.max_candidates);
    if ranked.is_empty() {
        return Err(OdometryError::RelocalizationFailed("no database candidates".into()));
    }
    for (id, score) in ranked {
        if score < cfg.score_min {
            break;
        }
        let Some(members) = map_members(id, graph, store) else {
            continue;
        };
        if let Some((kf_id, rel, n)) = verify_members(cur, &members, sensor, f64::INFINITY) {
            if n >= cfg.min_inliers {
                let kf = members.iter().find(|k| k.id == kf_id).expect("verified member exists");
                return Ok(Relocalization {
                    pose: kf.pose.compose(&rel),
                    relative: rel,
                    keyframe_id: kf_id,
                    local_map_id: id,
                    inliers: n,
                });
            }
        }
    }
    Err(OdometryError::RelocalizationFailed("no candidate passed geometric verification".into()))
}
