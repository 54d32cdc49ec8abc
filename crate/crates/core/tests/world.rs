use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rasterslam::bench_io::{generate_world, Aabb, SyntheticWorld, WorldSpec};
use rasterslam::geometry::{Point3, Pose};

fn walled() -> SyntheticWorld {
    let mut w = SyntheticWorld::new(&WorldSpec::straight(20.0));
    w.boxes = vec![Aabb {
        min: Point3::new(10.0, -50.0, 0.0),
        max: Point3::new(11.0, 50.0, 10.0),
    }];
    w
}

#[test]
fn ray_cast_hits_the_wall() {
    let w = walled();
    let x = Vector3::x();
    assert!((w.cast(&Point3::new(0.0, 0.0, 1.7), &x).unwrap() - 10.0).abs() < 1e-12);
    assert!((w.cast(&Point3::new(1.0, 0.0, 1.7), &x).unwrap() - 9.0).abs() < 1e-12);
    assert!(w.cast(&Point3::new(0.0, 0.0, 1.7), &(-x)).is_none());
    // Straight down meets the ground.
    assert!((w.cast(&Point3::new(0.0, 0.0, 1.7), &(-Vector3::z())).unwrap() - 1.7).abs() < 1e-12);
}

#[test]
fn range_noise_is_unbiased() {
    let w = walled();
    let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.7));
    let clean = w.scan_at(&pose, 0, None);
    let noisy = w.scan_at(&pose, 0, Some(&mut ChaCha8Rng::seed_from_u64(5)));
    assert_eq!(clean.len(), noisy.len());
    let n = clean.len() as f64;
    let diffs: Vec<f64> = clean.points.iter().zip(&noisy.points).map(|(a, b)| b.coords.norm() - a.coords.norm()).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sigma = w.spec.noise_sigma;
    assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - sigma).abs() < 0.1 * sigma, "sd {sd}");
}

#[test]
fn scans_depend_on_the_seed_only() {
    let mut spec = WorldSpec::straight(5.0);
    spec.step = 1.0;
    let (_, a) = generate_world(&spec, 1);
    let (_, b) = generate_world(&spec, 1);
    let (_, c) = generate_world(&spec, 2);
    assert_eq!(a, b);
    assert_ne!(a[0].0, c[0].0);
    assert_eq!(a[0].1, c[0].1);
}

#[test]
fn square_loop_closes_on_itself() {
    let w = SyntheticWorld::new(&WorldSpec::square_loop());
    let lap = 4.0 * (50.0 - 20.0) + 2.0 * std::f64::consts::PI * 10.0;
    assert!((w.path_length() - (lap + 40.0)).abs() < 1.0, "{}", w.path_length());
    // The overlap retraces the start of the lap.
    let start = w.poses[0].translation;
    let revisit = w.poses.iter().skip(10).map(|p| (p.translation - start).norm()).fold(f64::INFINITY, f64::min);
    assert!(revisit < 0.5);
}
