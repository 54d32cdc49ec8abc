//! Hot kernels on the rayon pool against a one-thread pool (each call is
//! handed to that pool, a few microseconds of overhead). Built without the
//! `parallel` feature, only the sequential variant runs.

use std::hint::black_box;

use criterion::measurement::WallTime;
use criterion::{criterion_group, criterion_main, BenchmarkGroup, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rasterslam::bench_io::{SyntheticWorld, WorldSpec};
use rasterslam::odometry::{preprocess, refine_icp, register, IcpTarget, TrackerConfig};

fn variants(group: &mut BenchmarkGroup<'_, WallTime>, f: impl Fn() + Send + Sync) {
    #[cfg(feature = "parallel")]
    {
        group.bench_function(format!("parallel/{}", rayon::current_num_threads()), |b| b.iter(&f));
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("sequential", |b| b.iter(|| one.install(&f)));
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(&f));
}

fn kernels(c: &mut Criterion) {
    let world = SyntheticWorld::new(&WorldSpec::straight(40.0));
    let cfg = TrackerConfig::default();
    let (a, b) = (world.poses[20], world.poses[21]);
    let cloud_a = world.scan_at(&a, 20, Some(&mut ChaCha8Rng::seed_from_u64(1)));
    let cloud_b = world.scan_at(&b, 21, Some(&mut ChaCha8Rng::seed_from_u64(2)));
    let scan_a = preprocess(&cloud_a, &cfg).unwrap();
    let scan_b = preprocess(&cloud_b, &cfg).unwrap();
    let target = IcpTarget::new(&scan_a.icp_cloud, cfg.icp.normal_radius);
    let (seed, _) = register(&scan_a.features, &scan_b.features, &cfg).unwrap();

    let mut g = c.benchmark_group("ray_cast_scan");
    g.sample_size(10);
    variants(&mut g, || {
        black_box(world.scan_at(&a, 0, None));
    });
    g.finish();

    let mut g = c.benchmark_group("preprocess");
    g.sample_size(10);
    variants(&mut g, || {
        black_box(preprocess(&cloud_a, &cfg).unwrap());
    });
    g.finish();

    let mut g = c.benchmark_group("icp_normals");
    g.sample_size(20);
    variants(&mut g, || {
        black_box(IcpTarget::new(&scan_a.icp_cloud, cfg.icp.normal_radius));
    });
    g.finish();

    let mut g = c.benchmark_group("icp_refine");
    g.sample_size(20);
    variants(&mut g, || {
        black_box(refine_icp(&target, &scan_b.icp_cloud, &seed, &cfg.icp));
    });
    g.finish();

    let mut g = c.benchmark_group("feature_registration");
    variants(&mut g, || {
        black_box(register(&scan_a.features, &scan_b.features, &cfg).ok());
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
