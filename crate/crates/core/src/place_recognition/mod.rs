//! Vocabulary tree over binary descriptors, the BOW database of local-map
//! images, and loop detection and closure.

mod database;
mod vocabulary;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BinaryDescriptor, FeatureSet};
use crate::geometry::Pose;
use crate::mapping::{LocalMap, LocalMapGraph, OfflineStore};
use crate::odometry::{register, Keyframe, TrackerConfig};
use crate::optim::{default_edge_information, optimize_pose_graph, GraphResult, LmConfig, OptimError, PoseGraph};

pub use database::{bow_score, BowDatabase};
pub use vocabulary::{majority, BowVector, VocNode, VocabularyTree};

#[derive(Debug, Error)]
pub enum PlaceError {
    #[error("need at least {required} descriptors, found {found}")]
    InsufficientData { found: usize, required: usize },
    #[error("database already holds map {0}")]
    DuplicateId(u64),
    #[error("database has no map {0}")]
    UnknownId(u64),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub score_min: f64,
    /// Maps holding a keyframe this close (in keyframe ids) to the query are skipped.
    pub recent_kf: u64,
    pub min_inliers: usize,
    pub max_candidates: usize,
    pub branching: usize,
    pub depth: usize,
    pub seed: u64,
    pub retrain_every: usize,
    /// Scale of the default edge information for loop edges.
    pub loop_weight: f64,
    /// A verified match farther than this from its keyframe is not a
    /// revisit of the same place.
    pub max_distance: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            score_min: 0.15,
            recent_kf: 30,
            min_inliers: 30,
            max_candidates: 10,
            branching: 10,
            depth: 3,
            seed: 0,
            retrain_every: 20,
            loop_weight: 1.0,
            max_distance: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query_keyframe_id: u64,
    pub local_map_id: u64,
    pub score: f64,
    pub matched_keyframe_id: Option<u64>,
    pub inliers: usize,
    /// Query body frame expressed in the matched keyframe's body frame.
    pub relative_pose: Option<Pose>,
}

/// Vocabulary plus database, trained online from local-map images.
#[derive(Debug, Clone)]
pub struct PlaceRecognizer {
    pub cfg: LoopConfig,
    vocab: Option<VocabularyTree>,
    db: BowDatabase,
    descriptors: std::collections::BTreeMap<u64, Vec<BinaryDescriptor>>,
    maps_seen: usize,
    trainings: usize,
}

/// Retrain after 1, 2, 4, 8, .. maps while below `every`, then every `every` maps.
pub fn retrain_due(maps_seen: usize, every: usize) -> bool {
    maps_seen > 0 && ((maps_seen < every && maps_seen.is_power_of_two()) || maps_seen.is_multiple_of(every.max(1)))
}

impl PlaceRecognizer {
    pub fn new(cfg: LoopConfig) -> Self {
        Self {
            cfg,
            vocab: None,
            db: BowDatabase::new(),
            descriptors: Default::default(),
            maps_seen: 0,
            trainings: 0,
        }
    }

    pub fn vocabulary(&self) -> Option<&VocabularyTree> {
        self.vocab.as_ref()
    }

    pub fn database(&self) -> &BowDatabase {
        &self.db
    }

    pub fn trainings(&self) -> usize {
        self.trainings
    }

    pub fn quantize(&self, features: &FeatureSet) -> BowVector {
        self.vocab.as_ref().map(|v| v.quantize(features)).unwrap_or_default()
    }

    /// Adds a finalized map's image to the database, retraining the
    /// vocabulary on schedule.
    pub fn add_map(&mut self, id: u64, image_features: &FeatureSet) -> Result<(), PlaceError> {
        if self.db.contains(id) {
            return Err(PlaceError::DuplicateId(id));
        }
        self.db.add(id, self.quantize(image_features))?;
        self.descriptors.insert(id, image_features.descriptors.clone());
        self.maps_seen += 1;
        if retrain_due(self.maps_seen, self.cfg.retrain_every) {
            self.retrain();
        }
        Ok(())
    }

    /// Retires `old` and adds `new_id` in its place.
    pub fn replace_map(&mut self, old: u64, new_id: u64, image_features: &FeatureSet) -> Result<(), PlaceError> {
        self.db.remove(old)?;
        self.descriptors.remove(&old);
        self.add_map(new_id, image_features)
    }

    /// Rebuilds the vocabulary from the current entries and requantizes them.
    /// Keeps the old vocabulary if there is too little data.
    pub fn retrain(&mut self) {
        let sets: Vec<Vec<BinaryDescriptor>> = self.descriptors.values().cloned().collect();
        match VocabularyTree::build(&sets, self.cfg.branching, self.cfg.depth, self.cfg.seed) {
            Ok(v) => {
                let descs = &self.descriptors;
                self.db.requantize(|id| v.quantize_descriptors(&descs[&id]));
                self.vocab = Some(v);
                self.trainings += 1;
            }
            Err(e) => log::debug!("vocabulary not retrained: {e}"),
        }
    }

    pub fn query(&self, features: &FeatureSet, max_results: usize) -> Vec<(u64, f64)> {
        if self.vocab.is_none() || self.db.is_empty() {
            return Vec::new();
        }
        self.db.query(&self.quantize(features), max_results)
    }
}

/// Member keyframes of a map, from the online graph or the archive.
pub fn map_members(id: u64, graph: &LocalMapGraph, store: Option<&OfflineStore>) -> Option<Vec<Keyframe>> {
    if let Some(m) = graph.online.get(&id) {
        return Some(m.keyframes.clone());
    }
    store?.load(id).ok().map(|m: LocalMap| m.keyframes)
}

/// Best member by RANSAC inliers: `(keyframe id, query-in-member pose, inliers)`.
/// Registrations placing the query farther than `max_distance` from the
/// member are ignored.
pub fn verify_members(
    features: &FeatureSet,
    members: &[Keyframe],
    sensor: &TrackerConfig,
    max_distance: f64,
) -> Option<(u64, Pose, usize)> {
    let mut best: Option<(u64, Pose, usize)> = None;
    for m in members {
        if let Ok((pose, n)) = register(&m.features, features, sensor) {
            if pose.translation.norm() <= max_distance && best.as_ref().is_none_or(|b| n > b.2) {
                best = Some((m.id, pose, n));
            }
        }
    }
    best
}

/// Keyframe ids of a map, online or archived, without loading it.
pub fn map_keyframe_ids<'a>(id: u64, graph: &'a LocalMapGraph, store: Option<&'a OfflineStore>) -> Option<&'a [u64]> {
    if let Some(m) = graph.online.get(&id) {
        return Some(&m.keyframe_ids);
    }
    store?.entry(id).map(|e| e.keyframe_ids.as_slice())
}

/// Database query with the score gate and the temporal guard applied:
/// candidate maps, best first, at most `cfg.max_candidates`.
pub fn bow_candidates(
    kf: &Keyframe,
    recognizer: &PlaceRecognizer,
    graph: &LocalMapGraph,
    store: Option<&OfflineStore>,
    cfg: &LoopConfig,
) -> Vec<(u64, f64)> {
    let mut out = Vec::new();
    for (id, score) in recognizer.query(&kf.features, usize::MAX) {
        if score < cfg.score_min || out.len() >= cfg.max_candidates {
            break;
        }
        let Some(ids) = map_keyframe_ids(id, graph, store) else {
            continue;
        };
        if ids.is_empty() || ids.iter().any(|m| kf.id.abs_diff(*m) <= cfg.recent_kf) {
            continue;
        }
        out.push((id, score));
    }
    out
}

/// Query, score gate and temporal guard, then geometric verification. The
/// first candidate with enough inliers wins.
pub fn detect_loop(
    kf: &Keyframe,
    recognizer: &PlaceRecognizer,
    graph: &LocalMapGraph,
    store: Option<&OfflineStore>,
    sensor: &TrackerConfig,
    cfg: &LoopConfig,
) -> Option<LoopCandidate> {
    for (id, score) in bow_candidates(kf, recognizer, graph, store, cfg) {
        let Some(members) = map_members(id, graph, store) else {
            continue;
        };
        if let Some((mid, rel, n)) = verify_members(&kf.features, &members, sensor, cfg.max_distance) {
            if n >= cfg.min_inliers {
                return Some(LoopCandidate {
                    query_keyframe_id: kf.id,
                    local_map_id: id,
                    score,
                    matched_keyframe_id: Some(mid),
                    inliers: n,
                    relative_pose: Some(rel),
                });
            }
        }
    }
    None
}

/// Adds the loop edge and optimizes. The graph keeps the optimized poses on
/// success and is left untouched on failure.
pub fn close_loop(
    candidate: &LoopCandidate,
    graph: &mut PoseGraph,
    cfg: &LoopConfig,
    lm: &LmConfig,
) -> Result<GraphResult, OptimError> {
    let (Some(m), Some(rel)) = (candidate.matched_keyframe_id, candidate.relative_pose) else {
        return Err(OptimError::InvalidProblem("loop candidate has no relative pose".into()));
    };
    graph.add_edge(m, candidate.query_keyframe_id, rel, default_edge_information() * cfg.loop_weight)?;
    match optimize_pose_graph(graph, lm) {
        Ok(res) => {
            graph.nodes = res.poses.clone();
            Ok(res)
        }
        Err(e) => {
            graph.edges.pop();
            Err(e)
        }
    }
}
