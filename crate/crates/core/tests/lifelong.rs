use std::sync::OnceLock;

use rasterslam::bench_io::{
    baseline_loop_search, bench_world, replay_keyframes, Backend, BaselineConfig, KeyframeLink, MapBuilder, SearchMode,
    SyntheticWorld,
};
use rasterslam::mapping::{LocalMap, LocalMapGraph, MappingConfig};
use rasterslam::odometry::{preprocess, Keyframe, RelocConfig, TrackerConfig};
use rasterslam::optim::LmConfig;
use rasterslam::place_recognition::{detect_loop, LoopConfig, PlaceRecognizer};

/// Two noiseless laps of the square, keyframes every 2.5 m at true poses.
fn two_laps() -> &'static (SyntheticWorld, Vec<Keyframe>) {
    static KFS: OnceLock<(SyntheticWorld, Vec<Keyframe>)> = OnceLock::new();
    KFS.get_or_init(|| {
        let mut spec = bench_world(2.0);
        spec.noise_sigma = 0.0;
        let world = SyntheticWorld::new(&spec);
        let kfs = replay_keyframes(&world, 0, 2.5, Some(150), &TrackerConfig::default()).unwrap();
        (world, kfs)
    })
}

fn backend(dir: &std::path::Path, mapping: &MappingConfig, loops: bool) -> Backend {
    Backend::new(
        dir,
        mapping.clone(),
        LoopConfig::default(),
        RelocConfig::default(),
        LmConfig::default(),
        TrackerConfig::default(),
        loops,
    )
    .unwrap()
}

#[test]
fn revisits_replace_maps_without_growing_the_online_set() {
    let (_, kfs) = two_laps();
    let sensor = TrackerConfig::default();
    // No distance culling: only loop replacements archive maps.
    let mapping = MappingConfig {
        d_th: 1e9,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut b = backend(dir.path(), &mapping, true);
    let mut builder = MapBuilder::new(mapping.clone(), sensor);
    let mut replacements = 0;
    let mut insert = |b: &mut Backend, lm: LocalMap| {
        let (online, archived, replaced) = (b.graph.online_count(), b.store.len(), b.counters.maps_replaced);
        let (id, stamp) = (lm.id, lm.stamp);
        b.on_map(lm).unwrap();
        if b.counters.maps_replaced > replaced {
            replacements += 1;
            assert_eq!(b.graph.online_count(), online);
            assert_eq!(b.store.len(), archived + 1);
            let old = b.store.entries().last().unwrap();
            assert!(old.stamp < stamp, "archived map {} is newer than {id}", old.id);
            assert!(!b.graph.online.contains_key(&old.id));
            assert!(b.graph.online.contains_key(&id));
        } else {
            assert_eq!(b.graph.online_count(), online + 1);
        }
        assert_eq!(b.graph.online_count() + b.store.len(), b.graph.finalized_total());
    };
    for kf in kfs {
        b.on_keyframe(kf, KeyframeLink::Odometry).unwrap();
        if let Some(lm) = builder.push(kf).unwrap() {
            insert(&mut b, lm);
        }
    }
    if let Some(lm) = builder.flush() {
        insert(&mut b, lm);
    }
    assert!(!b.loops_found.is_empty());
    assert!(replacements > 0);
    // Archived maps load back from disk.
    let id = b.store.entries()[0].id;
    assert_eq!(b.store.load(id).unwrap().id, id);
}

#[test]
fn bow_and_keyframe_search_agree_on_an_exact_revisit() {
    let (world, kfs) = two_laps();
    let sensor = TrackerConfig::default();
    let mapping = MappingConfig::default();
    let loops = LoopConfig::default();
    let first_lap = &kfs[..60];
    let dir = tempfile::tempdir().unwrap();
    let mut b = backend(dir.path(), &mapping, false);
    let mut builder = MapBuilder::new(mapping.clone(), sensor.clone());
    let mut maps = Vec::new();
    for kf in first_lap {
        b.on_keyframe(kf, KeyframeLink::Odometry).unwrap();
        if let Some(lm) = builder.push(kf).unwrap() {
            maps.push(lm.clone());
            b.on_map(lm).unwrap();
        }
    }

    // A later keyframe standing exactly where keyframe 20 stood.
    let target = &first_lap[20];
    let scan = preprocess(&world.scan_at(&target.pose, 9999, None), &sensor).unwrap();
    let query = Keyframe {
        id: 1000,
        frame_id: 9999,
        pose: target.pose,
        features: scan.features,
        dense: scan.dense,
        stamp: 1e3,
        local_map_id: None,
    };
    let bow = detect_loop(&query, &b.recognizer, &b.graph, Some(&b.store), &sensor, &loops).expect("bow loop");
    let base = baseline_loop_search(
        SearchMode::Keyframes,
        &query,
        &query.pose,
        first_lap,
        &maps,
        &sensor,
        &BaselineConfig::default(),
    )
    .expect("baseline loop");
    assert_eq!(bow.matched_keyframe_id, Some(target.id));
    assert_eq!(base.matched_keyframe_id, Some(target.id));
    // Neighbouring maps share their boundary keyframe, so the map ids may differ.
    for id in [bow.local_map_id, base.local_map_id] {
        assert!(maps.iter().any(|m| m.id == id && m.keyframe_ids.contains(&target.id)));
    }

    // Nothing mapped yet: neither search finds anything.
    let empty = PlaceRecognizer::new(loops.clone());
    assert!(detect_loop(&query, &empty, &LocalMapGraph::new(), None, &sensor, &loops).is_none());
    for mode in SearchMode::ALL {
        assert!(baseline_loop_search(mode, &query, &query.pose, &[], &[], &sensor, &BaselineConfig::default()).is_none());
    }
}
