use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rasterslam::bench_io::{
    bench_world, load_trajectory, loop_search_bench, relative_errors, replay_keyframes, run_pipeline, InputSource,
    RunOptions, SearchMode, SlamConfig, SyntheticWorld, METRICS_FILE, TRAJECTORY_FILE,
};
use rasterslam::odometry::read_odom_priors;

#[derive(Parser)]
#[command(name = "slam", version, about = "Laser SLAM on rasterized scans")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline on a KITTI directory or a synthetic world.
    Run {
        /// Directory of .bin scans, or `synthetic[:square|straight:<m>][:key=value,..]`.
        #[arg(long)]
        input: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_loop: bool,
        /// `frame_id tx ty tz qx qy qz qw weight` lines.
        #[arg(long)]
        odom_prior: Option<PathBuf>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Relative translation and rotation error of a trajectory.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,500,600,700,800")]
        lengths: Vec<f64>,
        /// Stamp tolerance when the files differ in length.
        #[arg(long, default_value_t = 0.02)]
        max_dt: f64,
        #[arg(long)]
        json: bool,
    },
    /// Time loop-candidate detection on a replayed synthetic run.
    BenchLoop {
        #[arg(long, value_delimiter = ',', default_value = "bow,localmaps,keyframes")]
        mode: Vec<SearchMode>,
        #[arg(long, default_value_t = 200)]
        keyframes: usize,
        #[arg(long, default_value_t = 3.0)]
        laps: f64,
        /// Keyframe spacing along the route, meters.
        #[arg(long, default_value_t = 2.5)]
        spacing: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Print the default configuration as JSON.
    Config,
}

fn load_config(path: Option<&PathBuf>) -> Result<SlamConfig> {
    match path {
        Some(p) => SlamConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SlamConfig::default()),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            input,
            output,
            seed,
            config,
            no_loop,
            odom_prior,
            max_frames,
        } => {
            let mut opts = RunOptions::new(InputSource::parse(&input)?, &output);
            opts.seed = seed;
            opts.config = load_config(config.as_ref())?;
            opts.loop_closure = !no_loop;
            opts.max_frames = max_frames;
            if let Some(p) = odom_prior {
                opts.odom_priors = Some(read_odom_priors(&p).with_context(|| format!("reading {}", p.display()))?);
            }
            let s = run_pipeline(&opts)?;
            println!(
                "{} frames tracked, {} keyframes, {} local maps (max {} online), {} loops",
                s.trajectory.len(),
                s.keyframes,
                s.local_maps,
                s.max_online,
                s.loops.len()
            );
            if let (Some(e), Some(o)) = (s.endpoint_error, s.endpoint_error_odometry) {
                println!("endpoint error {e:.3} m (odometry only {o:.3} m)");
            }
            if let Some(pr) = s.loop_pr.as_ref().filter(|p| p.truth_queries > 0) {
                println!("loop recall {:.3}, precision {:.3}", pr.recall, pr.precision);
            }
            for e in s.relative_errors.iter().flatten() {
                println!("  {:>6.0} m: {:.3} %  {:.5} deg/m", e.length, 100.0 * e.trans, e.rot.to_degrees());
            }
            println!("wrote {} and {}", output.join(TRAJECTORY_FILE).display(), output.join(METRICS_FILE).display());
        }
        Cmd::Eval {
            gt,
            est,
            lengths,
            max_dt,
            json,
        } => {
            let g = load_trajectory(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let e = load_trajectory(&est).with_context(|| format!("reading {}", est.display()))?;
            let (g, e) = g.align(&e, max_dt)?;
            let errs = relative_errors(&g, &e, &lengths)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&errs)?);
            } else {
                println!("{} aligned poses", g.len());
                println!("{:>8} {:>7} {:>10} {:>10}", "length", "pairs", "trans %", "rot deg/m");
                for r in &errs {
                    println!("{:>8.1} {:>7} {:>10.4} {:>10.6}", r.length, r.pairs, 100.0 * r.trans, r.rot.to_degrees());
                }
                let n: usize = errs.iter().map(|r| r.pairs).sum();
                let t: f64 = errs.iter().map(|r| r.trans * r.pairs as f64).sum::<f64>() / n as f64;
                let a: f64 = errs.iter().map(|r| r.rot * r.pairs as f64).sum::<f64>() / n as f64;
                println!("{:>8} {:>7} {:>10.4} {:>10.6}", "all", n, 100.0 * t, a.to_degrees());
            }
        }
        Cmd::BenchLoop {
            mode,
            keyframes,
            laps,
            spacing,
            seed,
            config,
            json,
        } => {
            if mode.is_empty() {
                bail!("no search mode given");
            }
            let cfg = load_config(config.as_ref())?;
            let world = SyntheticWorld::new(&bench_world(laps));
            let kfs = replay_keyframes(&world, seed, spacing, Some(keyframes), &cfg.tracker)?;
            let store = std::env::temp_dir().join(format!("slam-bench-loop-{}", std::process::id()));
            let report =
                loop_search_bench(&kfs, &mode, &cfg.mapping, &cfg.loops, &cfg.baseline, &cfg.tracker, &store);
            let _ = std::fs::remove_dir_all(&store);
            let report = report?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{} keyframes, {} local maps", report.keyframes, report.local_maps);
                println!("{:>10} {:>10} {:>10} {:>7} {:>7} {:>9}", "mode", "mean ms", "max ms", "loops", "recall", "precision");
                for m in &report.modes {
                    println!(
                        "{:>10} {:>10.3} {:>10.3} {:>7} {:>7.3} {:>9.3}",
                        m.mode.name(),
                        m.mean_ms,
                        m.max_ms,
                        m.loops.len(),
                        m.pr.recall,
                        m.pr.precision
                    );
                }
            }
        }
        Cmd::Config => {
            // Ignore a closed pipe (`slam config | head`).
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&SlamConfig::default())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
