//! Ground-truth replay: keyframes taken at true poses every few meters,
//! fed straight to mapping and loop search. Isolates map management and
//! candidate search from tracking drift.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{Backend, KeyframeLink, MapBuilder};
use super::baseline::{baseline_loop_search, BaselineConfig, SearchMode};
use super::metrics::{loop_pr, LoopPr, LoopTruth};
use super::synthetic::{SyntheticWorld, WorldSpec};
use super::BenchError;
use crate::mapping::{LocalMap, MappingConfig};
use crate::odometry::{preprocess, Keyframe, RelocConfig, TrackerConfig};
use crate::optim::LmConfig;
use crate::par::*;
use crate::place_recognition::{bow_candidates, detect_loop, LoopConfig};

/// Path indices spaced at least `spacing` meters apart, starting at 0.
pub fn spaced_indices(world: &SyntheticWorld, spacing: f64) -> Vec<usize> {
    let mut out = vec![0];
    let mut acc = 0.0;
    for i in 1..world.len() {
        acc += (world.poses[i].translation - world.poses[i - 1].translation).norm();
        if acc >= spacing - 1e-9 {
            out.push(i);
            acc = 0.0;
        }
    }
    out
}

/// Keyframes at true poses. Each scan gets its own noise stream, so the
/// result does not depend on evaluation order.
pub fn replay_keyframes(
    world: &SyntheticWorld,
    seed: u64,
    spacing: f64,
    max: Option<usize>,
    sensor: &TrackerConfig,
) -> Result<Vec<Keyframe>, BenchError> {
    let mut idx = spaced_indices(world, spacing);
    if let Some(m) = max {
        idx.truncate(m);
    }
    let scans: Vec<_> = idx
        .into_par_iter()
        .enumerate()
        .map(|(k, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let cloud = world.scan_at(&world.poses[i], i as u64, Some(&mut rng));
            preprocess(&cloud, sensor).map(|s| (k, i, s))
        })
        .collect();
    let mut out = Vec::with_capacity(scans.len());
    for r in scans {
        let (k, i, s) = r.map_err(|e| BenchError::Stage {
            stage: "tracking",
            source: Box::new(e),
        })?;
        out.push(Keyframe {
            id: k as u64,
            frame_id: i as u64,
            pose: world.poses[i],
            features: s.features,
            dense: s.dense,
            stamp: world.stamp(i),
            local_map_id: None,
        });
    }
    Ok(out)
}

fn stage<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl Fn(E) -> BenchError {
    move |e| BenchError::Stage {
        stage,
        source: Box::new(e),
    }
}

/// Online/archived counts after one map insertion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCountSample {
    pub map_id: u64,
    pub traveled: f64,
    pub online: usize,
    pub archived: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifelongReport {
    pub keyframes: usize,
    pub d_th: f64,
    /// Path length covered by one local map.
    pub map_span: f64,
    pub bound: usize,
    pub samples: Vec<MapCountSample>,
}

impl LifelongReport {
    pub fn max_online(&self) -> usize {
        self.samples.iter().map(|s| s.online).max().unwrap_or(0)
    }

    pub fn conserved(&self) -> bool {
        self.samples.iter().all(|s| s.online + s.archived == s.total)
    }
}

/// Maps a replayed keyframe stream and records the online/archived counts
/// after every map. Loop closure is off; culling alone bounds the graph.
pub fn lifelong_run(
    keyframes: &[Keyframe],
    mapping: &MappingConfig,
    sensor: &TrackerConfig,
    store_root: &Path,
) -> Result<LifelongReport, BenchError> {
    let mut builder = MapBuilder::new(mapping.clone(), sensor.clone());
    let mut backend = Backend::new(
        store_root,
        mapping.clone(),
        LoopConfig::default(),
        RelocConfig::default(),
        LmConfig::default(),
        sensor.clone(),
        false,
    )
    .map_err(stage("mapping"))?;
    let mut samples = Vec::new();
    let mut spans = Vec::new();
    let mut record = |backend: &mut Backend, lm: LocalMap| -> Result<(), BenchError> {
        let id = lm.id;
        if lm.keyframes.len() >= mapping.kfs_per_map {
            spans.push(lm.keyframes.windows(2).map(|w| (w[1].pose.translation - w[0].pose.translation).norm()).sum::<f64>());
        }
        backend.on_map(lm).map_err(stage("mapping"))?;
        samples.push(MapCountSample {
            map_id: id,
            traveled: backend.traveled,
            online: backend.graph.online_count(),
            archived: backend.store.len(),
            total: backend.graph.finalized_total(),
        });
        Ok(())
    };
    for kf in keyframes {
        backend.on_keyframe(kf, KeyframeLink::Odometry).map_err(stage("loop"))?;
        if let Some(lm) = builder.push(kf).map_err(stage("mapping"))? {
            record(&mut backend, lm)?;
        }
    }
    if let Some(lm) = builder.flush() {
        record(&mut backend, lm)?;
    }
    let span = spans.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LifelongReport {
        keyframes: keyframes.len(),
        d_th: mapping.d_th,
        map_span: span,
        bound: (mapping.d_th / span).ceil() as usize + 1,
        samples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: SearchMode,
    /// Mean candidate-detection time per keyframe, milliseconds.
    pub mean_ms: f64,
    pub max_ms: f64,
    pub loops: Vec<(u64, u64)>,
    pub pr: LoopPr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopBenchReport {
    pub keyframes: usize,
    pub local_maps: usize,
    pub modes: Vec<ModeTiming>,
}

impl LoopBenchReport {
    pub fn mode(&self, m: SearchMode) -> Option<&ModeTiming> {
        self.modes.iter().find(|t| t.mode == m)
    }
}

/// Candidate-detection cost of each search mode over one replayed stream.
/// Every mode sees the same maps and keyframes; the BOW mode is timed from
/// query to gated candidate list, the baselines from distance gate to the
/// best feature-matched candidate.
#[allow(clippy::too_many_arguments)]
pub fn loop_search_bench(
    keyframes: &[Keyframe],
    modes: &[SearchMode],
    mapping: &MappingConfig,
    loops: &LoopConfig,
    baseline: &BaselineConfig,
    sensor: &TrackerConfig,
    store_root: &Path,
) -> Result<LoopBenchReport, BenchError> {
    let mut builder = MapBuilder::new(mapping.clone(), sensor.clone());
    let mut backend = Backend::new(
        store_root,
        mapping.clone(),
        loops.clone(),
        RelocConfig::default(),
        LmConfig::default(),
        sensor.clone(),
        false,
    )
    .map_err(stage("mapping"))?;
    let mut maps: Vec<LocalMap> = Vec::new();
    let mut history: Vec<Keyframe> = Vec::new();
    let mut times: BTreeMap<SearchMode, Vec<f64>> = modes.iter().map(|m| (*m, Vec::new())).collect();
    let mut found: BTreeMap<SearchMode, Vec<(u64, u64)>> = modes.iter().map(|m| (*m, Vec::new())).collect();
    for kf in keyframes {
        backend.on_keyframe(kf, KeyframeLink::Odometry).map_err(stage("loop"))?;
        for &mode in modes {
            let t0 = Instant::now();
            let hit = match mode {
                SearchMode::Bow => {
                    let c = bow_candidates(kf, &backend.recognizer, &backend.graph, Some(&backend.store), loops);
                    times.get_mut(&mode).unwrap().push(t0.elapsed().as_secs_f64());
                    // Verification of the candidates is not part of the timing.
                    if c.is_empty() {
                        None
                    } else {
                        detect_loop(kf, &backend.recognizer, &backend.graph, Some(&backend.store), sensor, loops)
                    }
                }
                _ => {
                    let r = baseline_loop_search(mode, kf, &kf.pose, &history, &maps, sensor, baseline);
                    times.get_mut(&mode).unwrap().push(t0.elapsed().as_secs_f64());
                    r
                }
            };
            if let Some(c) = hit {
                found.get_mut(&mode).unwrap().push((kf.id, c.matched_keyframe_id.unwrap_or(u64::MAX)));
            }
        }
        history.push(kf.clone());
        if let Some(lm) = builder.push(kf).map_err(stage("mapping"))? {
            maps.push(lm.clone());
            backend.on_map(lm).map_err(stage("mapping"))?;
        }
    }
    let truth = LoopTruth::build(
        &keyframes.iter().map(|k| (k.id, k.pose.translation)).collect::<Vec<_>>(),
        LoopTruth::R_POS,
        LoopTruth::GAP,
    );
    let modes = modes
        .iter()
        .map(|&m| {
            let t = &times[&m];
            ModeTiming {
                mode: m,
                mean_ms: 1e3 * t.iter().sum::<f64>() / t.len().max(1) as f64,
                max_ms: 1e3 * t.iter().copied().fold(0.0, f64::max),
                pr: loop_pr(&found[&m], &truth),
                loops: found.remove(&m).unwrap_or_default(),
            }
        })
        .collect();
    Ok(LoopBenchReport {
        keyframes: keyframes.len(),
        local_maps: maps.len(),
        modes,
    })
}

/// The standard multi-lap square used for the search benchmark.
pub fn bench_world(laps: f64) -> WorldSpec {
    let mut spec = WorldSpec::square_loop();
    if let super::synthetic::PathKind::Square { overlap, leg, corner_radius } = &mut spec.path {
        let lap = 4.0 * (*leg - 2.0 * *corner_radius) + 2.0 * std::f64::consts::PI * *corner_radius;
        *overlap = (laps - 1.0).max(0.0) * lap;
    }
    spec
}
