use std::fs;
use std::process::{Command, Output};

fn slam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slam")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// One KITTI row: identity rotation, translation `x` along the x axis.
fn kitti_line(x: f64) -> String {
    format!("1 0 0 {x} 0 1 0 0 0 0 1 0\n")
}

#[test]
fn config_prints_parseable_defaults() {
    let o = slam(&["config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["tracker"]["icp"]["iterations"].is_u64());
    assert!(v["mapping"]["d_th"].is_number());
}

#[test]
fn short_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = slam(&[
        "run",
        "--input",
        "synthetic:straight:20",
        "--output",
        out.to_str().unwrap(),
        "--seed",
        "2",
        "--max-frames",
        "20",
        "--no-loop",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("20 frames tracked"));
    assert!(out.join("trajectory.txt").is_file());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 2);
    assert!(m.get("loop").is_none());
}

#[test]
fn run_with_config_file_and_priors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"tracker": {"icp": {"iterations": 0}}}"#).unwrap();
    // Exact motion along the route, 0.5 m per frame.
    let priors: String = (1..12).map(|i| format!("{i} 0.5 0 0 0 0 0 1 100\n")).collect();
    let prior_file = dir.path().join("priors.txt");
    fs::write(&prior_file, priors).unwrap();
    let out = dir.path().join("run");
    let o = slam(&[
        "run",
        "--input",
        "synthetic:straight:10",
        "--output",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--odom-prior",
        prior_file.to_str().unwrap(),
        "--max-frames",
        "12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["tracker"]["icp"]["iterations"], 0);
}

#[test]
fn eval_reports_a_uniform_stretch() {
    let dir = tempfile::tempdir().unwrap();
    let gt: String = (0..101).map(|i| kitti_line(0.5 * i as f64)).collect();
    let est: String = (0..101).map(|i| kitti_line(0.51 * i as f64)).collect();
    let (g, e) = (dir.path().join("gt.txt"), dir.path().join("est.txt"));
    fs::write(&g, gt).unwrap();
    fs::write(&e, est).unwrap();
    let o = slam(&["eval", "--gt", g.to_str().unwrap(), "--est", e.to_str().unwrap(), "--lengths", "5,10,20", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.len(), 3);
    for r in &v {
        assert!((r["trans"].as_f64().unwrap() - 0.02).abs() < 1e-9, "{r}");
        assert!(r["rot"].as_f64().unwrap().abs() < 1e-12);
    }
    let o = slam(&["eval", "--gt", g.to_str().unwrap(), "--est", e.to_str().unwrap(), "--lengths", "5"]);
    assert!(stdout(&o).lines().any(|l| l.trim_start().starts_with("all")));
}

#[test]
fn eval_without_pairs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("gt.txt");
    fs::write(&g, (0..5).map(|i| kitti_line(i as f64)).collect::<String>()).unwrap();
    let o = slam(&["eval", "--gt", g.to_str().unwrap(), "--est", g.to_str().unwrap(), "--lengths", "100"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no frame pairs"));
}

#[test]
fn small_loop_benchmark() {
    let o = slam(&["bench-loop", "--mode", "bow,keyframes", "--keyframes", "30", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["keyframes"], 30);
    let modes: Vec<&str> = v["modes"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes.len(), 2);
}

#[test]
fn missing_input_directory_fails_in_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let o = slam(&[
        "run",
        "--input",
        dir.path().join("nope").to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ingest"), "{err}");
}
