//! Dataset ingestion, the synthetic benchmark world, evaluation metrics,
//! resource sampling and the end-to-end pipeline.

mod backend;
mod baseline;
mod metrics;
mod pipeline;
mod plot;
mod replay;
mod resources;
mod synthetic;
mod trajectory;

use thiserror::Error;

pub use backend::{Backend, BackendCounters, KeyframeLink, LoopRecord, MapBuilder};
pub use baseline::{baseline_loop_search, BaselineConfig, SearchMode};
pub use metrics::{loop_pr, relative_errors, FramePairSet, LengthError, LoopPr, LoopTruth};
pub use pipeline::{
    default_lengths, run_pipeline, EvalConfig, InputSource, RunConfig, RunOptions, RunSummary, SlamConfig, StageTiming,
    ARCHIVE_DIR, GT_FILE, METRICS_FILE, PLOT_FILE, RESOURCE_FILE, TRAJECTORY_FILE,
};
pub use plot::trajectory_svg;
pub use replay::{
    bench_world, lifelong_run, loop_search_bench, replay_keyframes, spaced_indices, LifelongReport, LoopBenchReport,
    MapCountSample, ModeTiming,
};
pub use resources::{memory_kb, Gauges, ResourceSample, ResourceSampler};
pub use synthetic::{generate_world, Aabb, PathKind, SyntheticWorld, WorldSpec};
pub use trajectory::{
    load_kitti_calib, load_kitti_poses, load_kitti_scan, load_trajectory, load_tum, write_kitti_scan, Stamped, Trajectory, KITTI_RATE_HZ,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("no frame pairs for length {0} m")]
    NoPairs(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} stage failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
