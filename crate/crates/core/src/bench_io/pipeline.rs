use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{Backend, KeyframeLink, LoopRecord, MapBuilder};
use super::baseline::BaselineConfig;
use super::metrics::{loop_pr, relative_errors, LengthError, LoopPr, LoopTruth};
use super::plot::trajectory_svg;
use super::resources::{Gauges, ResourceSample, ResourceSampler};
use super::synthetic::{SyntheticWorld, WorldSpec};
use super::trajectory::{load_kitti_calib, load_kitti_poses, load_kitti_scan, Trajectory, KITTI_RATE_HZ};
use super::BenchError;
use crate::features::FeatureSet;
use crate::geometry::{PointCloud, Pose};
use crate::mapping::{LocalMap, MappingConfig};
use crate::odometry::{
    FrameOutcome, Keyframe, OdomPrior, OdometryError, RelocConfig, Relocalization, Tracker, TrackerConfig,
};
use crate::optim::LmConfig;
use crate::place_recognition::LoopConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluation lengths in meters; empty picks them from the path length.
    pub lengths: Vec<f64>,
    pub r_pos: f64,
    pub gap: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: Vec::new(),
            r_pos: LoopTruth::R_POS,
            gap: LoopTruth::GAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Consecutive failed relocalizations before tracking restarts at the
    /// last known pose.
    pub reloc_patience: usize,
    pub sample_interval_s: f64,
    pub channel_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reloc_patience: 20,
            sample_interval_s: 1.0,
            channel_capacity: 8,
        }
    }
}

/// Every tunable of the system; the JSON config file mirrors this.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub tracker: TrackerConfig,
    pub mapping: MappingConfig,
    pub loops: LoopConfig,
    pub reloc: RelocConfig,
    pub graph_lm: LmConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl SlamConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Synthetic(WorldSpec),
    /// A directory of KITTI `.bin` scans (directly or under `velodyne/`),
    /// optionally with `poses.txt`, `times.txt` and `calib.txt`.
    Kitti(PathBuf),
}

impl InputSource {
    /// `synthetic[:<world spec>]` or a directory path.
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s.strip_prefix("synthetic") {
            Some("") => Ok(Self::Synthetic(WorldSpec::square_loop())),
            Some(rest) if rest.starts_with(':') => Ok(Self::Synthetic(WorldSpec::parse(&rest[1..])?)),
            _ => Ok(Self::Kitti(PathBuf::from(s))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Synthetic(spec) => format!("synthetic {:?}", spec.path),
            Self::Kitti(dir) => dir.display().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub input: InputSource,
    pub output: PathBuf,
    pub seed: u64,
    pub config: SlamConfig,
    pub loop_closure: bool,
    pub odom_priors: Option<HashMap<u64, OdomPrior>>,
    pub max_frames: Option<usize>,
}

impl RunOptions {
    pub fn new(input: InputSource, output: impl Into<PathBuf>) -> Self {
        Self {
            input,
            output: output.into(),
            seed: 0,
            config: SlamConfig::default(),
            loop_closure: true,
            odom_priors: None,
            max_frames: None,
        }
    }
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl Fn(E) -> BenchError {
    move |e| BenchError::Stage {
        stage,
        source: Box::new(e),
    }
}

struct Frame {
    stamp: f64,
    cloud: PointCloud,
}

/// Scan source: the clouds are produced lazily on the ingest thread.
struct Ingest {
    frames: Box<dyn Iterator<Item = Result<Frame, BenchError>> + Send>,
    ground_truth: Option<Trajectory>,
    initial: Pose,
    len: usize,
}

fn kitti_files(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let sub = dir.join("velodyne");
    let root = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let entries = fs::read_dir(&root).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", root.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

fn open_input(opts: &RunOptions) -> Result<Ingest, BenchError> {
    let max = opts.max_frames.unwrap_or(usize::MAX);
    match &opts.input {
        InputSource::Synthetic(spec) => {
            let world = Arc::new(SyntheticWorld::new(spec));
            let n = world.len().min(max);
            let gt = Trajectory::from_sequence(&world.poses[..n], spec.scan_rate_hz);
            let initial = world.poses[0];
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let w = world.clone();
            let frames = (0..n).map(move |i| {
                Ok(Frame {
                    stamp: w.stamp(i),
                    cloud: w.scan_at(&w.poses[i], i as u64, Some(&mut rng)),
                })
            });
            Ok(Ingest {
                frames: Box::new(frames),
                ground_truth: Some(gt),
                initial,
                len: n,
            })
        }
        InputSource::Kitti(dir) => {
            let mut files = kitti_files(dir)?;
            if files.is_empty() {
                return Err(BenchError::Config(format!("no .bin scans under {}", dir.display())));
            }
            files.truncate(max);
            let poses = dir.join("poses.txt");
            let mut gt = if poses.is_file() { Some(load_kitti_poses(&poses)?) } else { None };
            // Ground truth is given for the left camera; estimates are in the LIDAR frame.
            let calib = dir.join("calib.txt");
            if let (Some(g), true) = (gt.as_mut(), calib.is_file()) {
                *g = g.rebased(&load_kitti_calib(&calib)?);
            }
            let times: Option<Vec<f64>> = fs::read_to_string(dir.join("times.txt"))
                .ok()
                .map(|t| t.split_whitespace().filter_map(|v| v.parse().ok()).collect());
            let initial = gt.as_ref().and_then(|g| g.poses().first().map(|p| p.pose)).unwrap_or_default();
            let n = files.len();
            let frames = files.into_iter().enumerate().map(move |(i, f)| {
                let mut cloud = load_kitti_scan(&f)?;
                cloud.frame_id = i as u64;
                let stamp = times.as_ref().and_then(|t| t.get(i).copied()).unwrap_or(i as f64 / KITTI_RATE_HZ);
                Ok(Frame { stamp, cloud })
            });
            Ok(Ingest {
                frames: Box::new(frames),
                ground_truth: gt,
                initial,
                len: n,
            })
        }
    }
}

enum MapMsg {
    Keyframe(Box<Keyframe>, KeyframeLink),
    Relocalize(Box<FeatureSet>, Sender<Result<Relocalization, OdometryError>>),
}

enum BackMsg {
    Keyframe(Box<Keyframe>, KeyframeLink),
    Map(Box<LocalMap>),
    Relocalize(Box<FeatureSet>, Sender<Result<Relocalization, OdometryError>>),
}

/// A tracked frame: its pose is `keyframe ∘ relative`.
#[derive(Debug, Clone, Copy)]
struct FrameRecord {
    frame_id: u64,
    stamp: f64,
    keyframe: u64,
    relative: Pose,
    /// This frame became `keyframe`.
    is_keyframe: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub busy_s: f64,
    pub items: usize,
}

impl StageTiming {
    fn add(&mut self, t0: Instant) {
        self.busy_s += t0.elapsed().as_secs_f64();
        self.items += 1;
    }
}

#[derive(Default)]
struct TrackingOutput {
    frames: Vec<FrameRecord>,
    lost: usize,
    restarts: usize,
    timing: StageTiming,
}

fn run_tracking(
    rx: Receiver<Result<Frame, BenchError>>,
    tx: Sender<MapMsg>,
    cfg: TrackerConfig,
    run: RunConfig,
    priors: Option<HashMap<u64, OdomPrior>>,
    initial: Pose,
    gauges: Arc<Gauges>,
) -> Result<TrackingOutput, BenchError> {
    let mut tracker = Tracker::new(cfg);
    let mut out = TrackingOutput::default();
    let mut anchor: Option<(u64, Pose)> = None;
    let mut failed = 0usize;
    for frame in rx {
        let frame = frame?;
        let t0 = Instant::now();
        let id = frame.cloud.frame_id;
        let prior = priors.as_ref().and_then(|p| p.get(&id));
        let emit = |kf: Keyframe, link: KeyframeLink, anchor: &mut Option<(u64, Pose)>| {
            *anchor = Some((kf.id, kf.pose));
            gauges.keyframes.fetch_add(1, Ordering::Relaxed);
            tx.send(MapMsg::Keyframe(Box::new(kf), link)).is_ok()
        };
        match tracker.process(&frame.cloud, frame.stamp, prior, &initial) {
            Ok(FrameOutcome::Tracked { pose, keyframe }) => {
                failed = 0;
                let is_keyframe = keyframe.is_some();
                if let Some(kf) = keyframe {
                    if !emit(kf, KeyframeLink::Odometry, &mut anchor) {
                        break;
                    }
                }
                if let Some((k, p)) = anchor {
                    out.frames.push(FrameRecord {
                        frame_id: id,
                        stamp: frame.stamp,
                        keyframe: k,
                        relative: p.between(&pose),
                        is_keyframe,
                    });
                }
            }
            Ok(FrameOutcome::Lost { scan, reason }) => {
                out.lost += 1;
                let (reply_tx, reply_rx) = mpsc::channel();
                if tx.send(MapMsg::Relocalize(Box::new(scan.features.clone()), reply_tx)).is_err() {
                    break;
                }
                let resumed = match reply_rx.recv() {
                    Ok(Ok(r)) => {
                        log::info!("frame {id}: relocalized against keyframe {}", r.keyframe_id);
                        let kf = tracker.resume(&scan, r.pose, frame.stamp);
                        Some((
                            kf,
                            KeyframeLink::Relocalized {
                                matched: r.keyframe_id,
                                relative: r.relative,
                            },
                        ))
                    }
                    Ok(Err(e)) => {
                        failed += 1;
                        log::debug!("frame {id}: {reason}; {e}");
                        (failed >= run.reloc_patience).then(|| {
                            out.restarts += 1;
                            log::warn!("frame {id}: restarting tracking at the last pose");
                            let last = tracker.state.last_pose;
                            (tracker.resume(&scan, last, frame.stamp), KeyframeLink::Restarted)
                        })
                    }
                    Err(_) => break,
                };
                if let Some((kf, link)) = resumed {
                    failed = 0;
                    if !emit(kf, link, &mut anchor) {
                        break;
                    }
                    let (k, _) = anchor.expect("just set");
                    out.frames.push(FrameRecord {
                        frame_id: id,
                        stamp: frame.stamp,
                        keyframe: k,
                        relative: Pose::identity(),
                        is_keyframe: true,
                    });
                }
            }
            Err(e) => {
                out.lost += 1;
                log::warn!("frame {id}: {e}");
            }
        }
        out.timing.add(t0);
    }
    Ok(out)
}

fn run_mapping(rx: Receiver<MapMsg>, tx: Sender<BackMsg>, mapping: MappingConfig, sensor: TrackerConfig) -> StageTiming {
    let mut builder = MapBuilder::new(mapping, sensor);
    let mut timing = StageTiming::default();
    for msg in rx {
        let t0 = Instant::now();
        let sent = match msg {
            MapMsg::Keyframe(kf, link) => {
                let map = match builder.push(&kf) {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("keyframe {}: not mapped ({e})", kf.id);
                        None
                    }
                };
                let mut ok = tx.send(BackMsg::Keyframe(kf, link)).is_ok();
                if let Some(m) = map {
                    ok &= tx.send(BackMsg::Map(Box::new(m))).is_ok();
                }
                ok
            }
            MapMsg::Relocalize(f, reply) => tx.send(BackMsg::Relocalize(f, reply)).is_ok(),
        };
        timing.add(t0);
        if !sent {
            return timing;
        }
    }
    if let Some(m) = builder.flush() {
        let _ = tx.send(BackMsg::Map(Box::new(m)));
    }
    timing
}

fn run_backend(rx: Receiver<BackMsg>, mut backend: Backend, gauges: Arc<Gauges>) -> Result<(Backend, StageTiming), BenchError> {
    let mut timing = StageTiming::default();
    for msg in rx {
        let t0 = Instant::now();
        match msg {
            BackMsg::Keyframe(kf, link) => {
                backend.on_keyframe(&kf, link).map_err(stage_err("loop"))?;
            }
            BackMsg::Map(m) => {
                backend.on_map(*m).map_err(stage_err("mapping"))?;
                gauges.online_maps.store(backend.graph.online_count(), Ordering::Relaxed);
                gauges.db_entries.store(backend.recognizer.database().len(), Ordering::Relaxed);
            }
            BackMsg::Relocalize(f, reply) => {
                let _ = reply.send(backend.relocalize(&f));
            }
        }
        timing.add(t0);
    }
    Ok((backend, timing))
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: PathBuf,
    pub trajectory: Trajectory,
    /// Same frames, odometry only (no loop corrections).
    pub odometry: Trajectory,
    pub ground_truth: Option<Trajectory>,
    pub loops: Vec<LoopRecord>,
    pub loop_pr: Option<LoopPr>,
    pub relative_errors: Option<Vec<LengthError>>,
    pub endpoint_error: Option<f64>,
    pub endpoint_error_odometry: Option<f64>,
    pub keyframes: usize,
    /// `(keyframe id, frame id)` of every keyframe.
    pub keyframe_frames: Vec<(u64, u64)>,
    pub local_maps: usize,
    pub max_online: usize,
    pub resources: Vec<ResourceSample>,
    pub metrics: serde_json::Value,
}

/// Default evaluation lengths: KITTI's 100..800 m when the path is long
/// enough, otherwise 5, 10, 20, 40.. meters up to half the path.
pub fn default_lengths(path_length: f64) -> Vec<f64> {
    if path_length >= 800.0 {
        return (1..=8).map(|k| 100.0 * k as f64).collect();
    }
    let mut v = vec![5.0];
    let mut l = 10.0;
    while l <= path_length / 2.0 {
        v.push(l);
        l *= 2.0;
    }
    v
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const PLOT_FILE: &str = "trajectory.svg";
pub const ARCHIVE_DIR: &str = "map";
pub const RESOURCE_FILE: &str = "resources.csv";
pub const GT_FILE: &str = "ground_truth.txt";

/// Ingest, tracking, mapping and loop closure on their own threads joined
/// by ordered channels; relocalization requests travel the same channels,
/// so results do not depend on thread timing.
pub fn run_pipeline(opts: &RunOptions) -> Result<RunSummary, BenchError> {
    let wall = Instant::now();
    let cfg = &opts.config;
    let ingest = open_input(opts).map_err(|e| match e {
        BenchError::Io(io) => BenchError::Stage {
            stage: "ingest",
            source: Box::new(io),
        },
        other => other,
    })?;
    fs::create_dir_all(&opts.output).map_err(stage_err("output"))?;
    let archive_root = opts.output.join(ARCHIVE_DIR);
    if archive_root.exists() {
        fs::remove_dir_all(&archive_root).map_err(stage_err("output"))?;
    }
    let backend = Backend::new(
        &archive_root,
        cfg.mapping.clone(),
        cfg.loops.clone(),
        cfg.reloc.clone(),
        cfg.graph_lm.clone(),
        cfg.tracker.clone(),
        opts.loop_closure,
    )
    .map_err(stage_err("mapping"))?;

    let gauges = Arc::new(Gauges::default());
    let sampler = ResourceSampler::start(gauges.clone(), Duration::from_secs_f64(cfg.run.sample_interval_s.max(0.01)));
    let (frame_tx, frame_rx): (SyncSender<Result<Frame, BenchError>>, _) =
        mpsc::sync_channel(cfg.run.channel_capacity.max(1));
    let (map_tx, map_rx) = mpsc::channel();
    let (back_tx, back_rx) = mpsc::channel();
    let ground_truth = ingest.ground_truth.clone();
    let initial = ingest.initial;
    let n_input = ingest.len;

    let (track_out, map_timing, back_out, ingest_timing) = thread::scope(|s| {
        let frames = ingest.frames;
        let ingest_h = s.spawn(move || {
            let mut t = StageTiming::default();
            for f in frames {
                let t0 = Instant::now();
                let failed = f.is_err();
                t.add(t0);
                if frame_tx.send(f).is_err() || failed {
                    break;
                }
            }
            t
        });
        let (tc, run, priors, g) = (cfg.tracker.clone(), cfg.run.clone(), opts.odom_priors.clone(), gauges.clone());
        let track_h = s.spawn(move || run_tracking(frame_rx, map_tx, tc, run, priors, initial, g));
        let (mc, tc) = (cfg.mapping.clone(), cfg.tracker.clone());
        let map_h = s.spawn(move || run_mapping(map_rx, back_tx, mc, tc));
        let g = gauges.clone();
        let back_h = s.spawn(move || run_backend(back_rx, backend, g));
        (
            track_h.join().expect("tracking thread panicked"),
            map_h.join().expect("mapping thread panicked"),
            back_h.join().expect("loop thread panicked"),
            ingest_h.join().expect("ingest thread panicked"),
        )
    });
    let track_out = track_out.map_err(|e| match e {
        BenchError::Io(io) => BenchError::Stage {
            stage: "ingest",
            source: Box::new(io),
        },
        other => other,
    })?;
    let (mut backend, back_timing) = back_out?;
    let resources = sampler.finish();

    // Trajectories from the optimized and the raw keyframe poses.
    let mut trajectory = Trajectory::new();
    let mut odometry = Trajectory::new();
    for f in &track_out.frames {
        let (Some(opt), Some(raw)) = (backend.keyframe_pose(f.keyframe), backend.odometry.get(&f.keyframe)) else {
            continue;
        };
        trajectory.push(f.frame_id, f.stamp, opt.compose(&f.relative))?;
        odometry.push(f.frame_id, f.stamp, raw.compose(&f.relative))?;
    }

    let out = &opts.output;
    let io = stage_err::<std::io::Error>("output");
    let mut buf = Vec::new();
    trajectory.write_tum(&mut buf).map_err(&io)?;
    fs::write(out.join(TRAJECTORY_FILE), &buf).map_err(&io)?;

    // Evaluation against ground truth on the tracked frames.
    let mut rel_err = None;
    let mut rel_err_msg = None;
    let mut endpoint = None;
    let mut endpoint_odom = None;
    let mut gt_sub = None;
    if let Some(gt) = &ground_truth {
        let sub = Trajectory::from_poses(trajectory.poses().iter().filter_map(|p| gt.get(p.frame_id).copied()))?;
        if sub.len() == trajectory.len() && !sub.is_empty() {
            let path = *sub.distances().last().unwrap_or(&0.0);
            let lengths: Vec<f64> = if cfg.eval.lengths.is_empty() {
                default_lengths(path)
            } else {
                cfg.eval.lengths.iter().copied().filter(|&l| l <= path).collect()
            };
            match relative_errors(&sub, &trajectory, &lengths) {
                Ok(v) => rel_err = Some(v),
                Err(e) => rel_err_msg = Some(e.to_string()),
            }
            let last = sub.poses().last().unwrap().pose.translation;
            endpoint = trajectory.poses().last().map(|p| (p.pose.translation - last).norm());
            endpoint_odom = odometry.poses().last().map(|p| (p.pose.translation - last).norm());
            let mut b = Vec::new();
            gt.write_kitti(&mut b).map_err(&io)?;
            fs::write(out.join(GT_FILE), b).map_err(&io)?;
            gt_sub = Some(sub);
        }
    }

    let keyframe_frames: Vec<(u64, u64)> =
        track_out.frames.iter().filter(|f| f.is_keyframe).map(|f| (f.keyframe, f.frame_id)).collect();
    let pr = match (&ground_truth, opts.loop_closure) {
        (Some(gt), true) => {
            let kfs: Vec<_> = keyframe_frames
                .iter()
                .filter_map(|(k, f)| gt.get(*f).map(|p| (*k, p.pose.translation)))
                .collect();
            let truth = LoopTruth::build(&kfs, cfg.eval.r_pos, cfg.eval.gap);
            let declared: Vec<(u64, u64)> =
                backend.loops_found.iter().map(|l| (l.query_keyframe_id, l.matched_keyframe_id)).collect();
            Some(loop_pr(&declared, &truth))
        }
        _ => None,
    };

    // Plot.
    let est_xy = trajectory.positions();
    let gt_xy = gt_sub.as_ref().map(|g| g.positions());
    let loop_xy: Vec<_> = backend
        .loops_found
        .iter()
        .filter_map(|l| {
            Some((
                backend.keyframe_pose(l.query_keyframe_id)?.translation,
                backend.keyframe_pose(l.matched_keyframe_id)?.translation,
            ))
        })
        .collect();
    fs::write(out.join(PLOT_FILE), trajectory_svg(&est_xy, gt_xy.as_deref(), &loop_xy)).map_err(&io)?;

    // Archive: everything still online, plus the vocabulary and database.
    let online_final = backend.graph.online_count();
    let archived_during_run = backend.store.len();
    backend.archive_online().map_err(stage_err("mapping"))?;
    if let Some(v) = backend.recognizer.vocabulary() {
        fs::write(archive_root.join("vocabulary.bin"), v.to_bytes()).map_err(&io)?;
    }
    let mut db = Vec::new();
    backend
        .recognizer
        .database()
        .write_jsonl(&mut db)
        .map_err(stage_err("loop"))?;
    fs::write(archive_root.join("database.jsonl"), db).map_err(&io)?;

    let mut csv = String::from("t_s,rss_kb,peak_rss_kb,online_maps,db_entries,keyframes\n");
    for r in &resources {
        let o = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{:.3},{},{},{},{},{}\n",
            r.t,
            o(r.rss_kb),
            o(r.peak_rss_kb),
            r.online_maps,
            r.db_entries,
            r.keyframes
        ));
    }
    fs::write(out.join(RESOURCE_FILE), csv).map_err(&io)?;

    let c = &backend.counters;
    let ms = |t: &StageTiming| if t.items == 0 { 0.0 } else { 1e3 * t.busy_s / t.items as f64 };
    let peak = resources.iter().filter_map(|r| r.peak_rss_kb).max();
    let mut metrics = json!({
        "input": opts.input.describe(),
        "seed": opts.seed,
        "frames": {
            "input": n_input,
            "tracked": trajectory.len(),
            "lost": track_out.lost,
            "restarts": track_out.restarts,
            "keyframes": c.keyframes,
            "local_maps": c.maps_finalized,
        },
        "maps": {
            "online_final": online_final,
            "max_online": c.max_online,
            "archived_during_run": archived_during_run,
            "replaced_on_loop": c.maps_replaced,
            "culled": c.maps_culled,
            "db_entries": backend.recognizer.database().len(),
            "vocabulary_trainings": backend.recognizer.trainings(),
        },
        "relative_errors": rel_err,
        "endpoint_error_m": endpoint,
        "endpoint_error_odometry_m": endpoint_odom,
        "timing": {
            "wall_s": wall.elapsed().as_secs_f64(),
            "ingest": { "busy_s": ingest_timing.busy_s, "items": ingest_timing.items, "mean_ms": ms(&ingest_timing) },
            "tracking": { "busy_s": track_out.timing.busy_s, "items": track_out.timing.items, "mean_ms": ms(&track_out.timing) },
            "mapping": { "busy_s": map_timing.busy_s, "items": map_timing.items, "mean_ms": ms(&map_timing) },
            "loop": { "busy_s": back_timing.busy_s, "items": back_timing.items, "mean_ms": ms(&back_timing) },
        },
        "resources": {
            "peak_rss_kb": peak,
            "sample_interval_s": cfg.run.sample_interval_s,
            "samples": resources.len(),
        },
        "config": cfg,
    });
    if let Some(m) = rel_err_msg {
        metrics["relative_errors_error"] = json!(m);
    }
    if opts.loop_closure {
        metrics["loop"] = json!({
            "detected": backend.loops_found.len(),
            "queries": c.loop_queries,
            "relocalizations": c.relocalizations,
            "truth": { "r_pos": cfg.eval.r_pos, "gap": cfg.eval.gap },
            "pr": pr,
            "loops": backend.loops_found,
        });
    }
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| BenchError::Config(e.to_string()))?;
    fs::write(out.join(METRICS_FILE), text).map_err(&io)?;

    Ok(RunSummary {
        output: out.clone(),
        trajectory,
        odometry,
        ground_truth,
        loops: backend.loops_found.clone(),
        loop_pr: pr,
        relative_errors: metrics["relative_errors"].is_array().then(|| serde_json::from_value(metrics["relative_errors"].clone()).unwrap_or_default()),
        endpoint_error: endpoint,
        endpoint_error_odometry: endpoint_odom,
        keyframes: c.keyframes,
        keyframe_frames,
        local_maps: c.maps_finalized,
        max_online: c.max_online,
        resources,
        metrics,
    })
}
