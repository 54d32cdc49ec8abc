//! Mapping and loop-closure stages as plain sequential state machines. The
//! pipeline runs them on their own threads; the replay harness calls them
//! directly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSet;
use crate::geometry::Pose;
use crate::mapping::{accumulate, finalize, LocalMap, LocalMapGraph, MappingConfig, MappingError, OfflineStore};
use crate::odometry::{relocalize, Keyframe, OdometryError, RelocConfig, Relocalization, TrackerConfig};
use crate::optim::{default_edge_information, LmConfig, OptimError, PoseGraph};
use crate::place_recognition::{close_loop, detect_loop, LoopCandidate, LoopConfig, PlaceRecognizer};

/// Accumulates keyframes into local maps; consecutive maps share their
/// boundary keyframe.
#[derive(Debug)]
pub struct MapBuilder {
    pub cfg: MappingConfig,
    pub sensor: TrackerConfig,
    current: LocalMap,
    next_id: u64,
}

impl MapBuilder {
    pub fn new(cfg: MappingConfig, sensor: TrackerConfig) -> Self {
        Self {
            cfg,
            sensor,
            current: LocalMap::new(0),
            next_id: 1,
        }
    }

    fn finalize_current(&mut self) -> LocalMap {
        match finalize(&self.current, &self.cfg, &self.sensor) {
            Ok(m) => m,
            Err(MappingError::FinalizeFailed { map, .. }) => *map,
            Err(e) => unreachable!("finalize only fails in BA: {e}"),
        }
    }

    /// Adds a keyframe; returns the finalized map when the current one fills up.
    pub fn push(&mut self, kf: &Keyframe) -> Result<Option<LocalMap>, MappingError> {
        let full = accumulate(&mut self.current, kf, &self.cfg)?;
        if !full {
            return Ok(None);
        }
        let done = self.finalize_current();
        self.current = LocalMap::new(self.next_id);
        self.next_id += 1;
        accumulate(&mut self.current, kf, &self.cfg)?;
        Ok(Some(done))
    }

    /// Finalizes a partial map at the end of a run, if it has anything new.
    pub fn flush(&mut self) -> Option<LocalMap> {
        if self.current.keyframes.len() < 2 {
            return None;
        }
        let done = self.finalize_current();
        self.current = LocalMap::new(self.next_id);
        self.next_id += 1;
        Some(done)
    }
}

/// How a keyframe is attached to the pose graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyframeLink {
    /// Odometry from the previous keyframe.
    Odometry,
    /// Relocalized against `matched` with the query pose in its frame.
    Relocalized { matched: u64, relative: Pose },
    /// Tracking restarted without a fix; a weak identity-motion edge keeps
    /// the graph connected.
    Restarted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub query_keyframe_id: u64,
    pub matched_keyframe_id: u64,
    pub local_map_id: u64,
    pub score: f64,
    pub inliers: usize,
    pub optimized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendCounters {
    pub keyframes: usize,
    pub maps_finalized: usize,
    pub maps_replaced: usize,
    pub maps_culled: usize,
    pub max_online: usize,
    pub relocalizations: usize,
    pub loop_queries: usize,
}

/// Owns the local-map graph, the archive, the place recognizer and the
/// keyframe pose graph.
pub struct Backend {
    pub mapping: MappingConfig,
    pub loops: LoopConfig,
    pub reloc: RelocConfig,
    pub graph_lm: LmConfig,
    pub sensor: TrackerConfig,
    pub loop_closure: bool,
    pub recognizer: PlaceRecognizer,
    pub graph: LocalMapGraph,
    pub store: OfflineStore,
    pub poses: PoseGraph,
    /// Odometry-frame pose of every keyframe as tracked.
    pub odometry: BTreeMap<u64, Pose>,
    pub loops_found: Vec<LoopRecord>,
    pub counters: BackendCounters,
    pub traveled: f64,
    last_kf: Option<u64>,
    /// Query keyframe to the map it matched; applied when the query's map is finalized.
    pending: BTreeMap<u64, u64>,
}

impl Backend {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store_root: &Path,
        mapping: MappingConfig,
        loops: LoopConfig,
        reloc: RelocConfig,
        graph_lm: LmConfig,
        sensor: TrackerConfig,
        loop_closure: bool,
    ) -> Result<Self, MappingError> {
        Ok(Self {
            recognizer: PlaceRecognizer::new(loops.clone()),
            mapping,
            loops,
            reloc,
            graph_lm,
            sensor,
            loop_closure,
            graph: LocalMapGraph::new(),
            store: OfflineStore::open(store_root)?,
            poses: PoseGraph::default(),
            odometry: BTreeMap::new(),
            loops_found: Vec::new(),
            counters: BackendCounters::default(),
            traveled: 0.0,
            last_kf: None,
            pending: BTreeMap::new(),
        })
    }

    /// Adds the keyframe to the pose graph and, if enabled, looks for a loop.
    pub fn on_keyframe(&mut self, kf: &Keyframe, link: KeyframeLink) -> Result<Option<LoopRecord>, OptimError> {
        self.counters.keyframes += 1;
        let prev = self.last_kf.replace(kf.id);
        match (prev, link) {
            (None, _) => {
                self.poses.nodes.insert(kf.id, kf.pose);
                self.poses.fixed.insert(kf.id);
            }
            (Some(p), KeyframeLink::Odometry) => {
                let rel = self.odometry[&p].between(&kf.pose);
                self.traveled += rel.translation.norm();
                self.poses.nodes.insert(kf.id, self.poses.nodes[&p].compose(&rel));
                self.poses.add_edge(p, kf.id, rel, default_edge_information())?;
            }
            (Some(_), KeyframeLink::Relocalized { matched, relative }) => {
                self.poses.nodes.insert(kf.id, self.poses.nodes[&matched].compose(&relative));
                self.poses
                    .add_edge(matched, kf.id, relative, default_edge_information() * self.loops.loop_weight)?;
                self.counters.relocalizations += 1;
            }
            (Some(p), KeyframeLink::Restarted) => {
                self.poses.nodes.insert(kf.id, self.poses.nodes[&p]);
                self.poses.add_edge(p, kf.id, Pose::identity(), Matrix6::identity() * 1e-6)?;
            }
        }
        self.odometry.insert(kf.id, kf.pose);
        if !self.loop_closure {
            return Ok(None);
        }
        self.counters.loop_queries += 1;
        let Some(cand) = detect_loop(kf, &self.recognizer, &self.graph, Some(&self.store), &self.sensor, &self.loops)
        else {
            return Ok(None);
        };
        Ok(Some(self.accept_loop(&cand)))
    }

    fn accept_loop(&mut self, cand: &LoopCandidate) -> LoopRecord {
        let matched = cand.matched_keyframe_id.expect("detect_loop sets the matched keyframe");
        let optimized = match close_loop(cand, &mut self.poses, &self.loops, &self.graph_lm) {
            Ok(_) => true,
            Err(e) => {
                log::warn!("loop {} -> {}: optimization failed ({e})", cand.query_keyframe_id, matched);
                false
            }
        };
        self.pending.entry(cand.query_keyframe_id).or_insert(cand.local_map_id);
        let rec = LoopRecord {
            query_keyframe_id: cand.query_keyframe_id,
            matched_keyframe_id: matched,
            local_map_id: cand.local_map_id,
            score: cand.score,
            inliers: cand.inliers,
            optimized,
        };
        log::info!(
            "loop: keyframe {} -> {} (map {}, score {:.3}, {} inliers)",
            rec.query_keyframe_id,
            matched,
            rec.local_map_id,
            rec.score,
            rec.inliers
        );
        self.loops_found.push(rec.clone());
        rec
    }

    /// Culls by distance, then inserts the map, replacing the map a member
    /// keyframe closed a loop against when that map is still online.
    pub fn on_map(&mut self, lm: LocalMap) -> Result<(), MappingError> {
        self.counters.maps_culled += self.graph.cull(&mut self.store, self.traveled, &self.mapping)?;
        self.counters.maps_finalized += 1;
        let matched = lm
            .keyframe_ids
            .iter()
            .filter_map(|k| self.pending.get(k))
            .copied()
            .find(|m| self.graph.online.contains_key(m));
        self.pending.retain(|k, _| !lm.keyframe_ids.contains(k));
        let (id, feats) = (lm.id, lm.image_features.clone());
        let place = match matched {
            Some(m) => {
                self.graph.update_on_loop(&mut self.store, lm, m)?;
                self.counters.maps_replaced += 1;
                // The replaced map's entry may already be gone if it was culled earlier.
                match self.recognizer.replace_map(m, id, &feats) {
                    Ok(()) => Ok(()),
                    Err(_) => self.recognizer.add_map(id, &feats),
                }
            }
            None => {
                self.graph.insert(lm)?;
                self.recognizer.add_map(id, &feats)
            }
        };
        if let Err(e) = place {
            log::warn!("map {id}: not added to the database ({e})");
        }
        self.counters.max_online = self.counters.max_online.max(self.graph.online_count());
        Ok(())
    }

    pub fn relocalize(&self, features: &FeatureSet) -> Result<Relocalization, OdometryError> {
        relocalize(features, &self.recognizer, &self.graph, Some(&self.store), &self.sensor, &self.reloc)
    }

    /// Optimized pose of a keyframe.
    pub fn keyframe_pose(&self, id: u64) -> Option<Pose> {
        self.poses.nodes.get(&id).copied()
    }

    /// Archives everything still online, e.g. at shutdown.
    pub fn archive_online(&mut self) -> Result<usize, MappingError> {
        let n = self.graph.online_count();
        self.graph.cull(&mut self.store, f64::INFINITY, &MappingConfig { d_th: -1.0, ..self.mapping.clone() })?;
        Ok(n)
    }
}
