use std::collections::BTreeMap;
use std::path::Path;

use cinfer::dataset::{
    generate_synthetic, ingest_ngsim, load_cache, min_leader_gap, replay_step, save_cache, simulate,
    slice_instances, write_ngsim, CostWeights, IngestOptions, NeighborWindow, ReplayWorld, SynthConfig,
    FEET_TO_METERS,
};
use cinfer::planner::{candidates, SamplingSpec};
use cinfer::scene::RoadSpec;
use proptest::prelude::*;

fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        vehicles: 12,
        duration_s: 40.0,
        spawn_length_m: 300.0,
        seed,
        stride: 5,
        ..Default::default()
    }
}

/// Writes an NGSIM CSV with the given vehicles, each present on a list of
/// frames, driving straight at 30 ft/s.
fn write_csv(path: &Path, presence: &[(i64, Vec<i64>)]) {
    let mut text = String::from("Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID\n");
    for (id, frames) in presence {
        for &f in frames {
            let y = 100.0 * *id as f64 + 3.0 * f as f64;
            text.push_str(&format!("{id},{f},{},{y},30,1\n", 6.0 + 12.0 * (*id as f64 - 1.0)));
        }
    }
    std::fs::write(path, text).unwrap();
}

/// Anchors `f` for which every frame `f..=f+T` is present, stepping by
/// `stride` from the first eligible frame of each vehicle.
fn brute_force_count(presence: &[(i64, Vec<i64>)], t_steps: i64, stride: usize) -> usize {
    presence
        .iter()
        .map(|(_, frames)| {
            let eligible: Vec<i64> = frames
                .iter()
                .copied()
                .filter(|&f| (f..=f + t_steps).all(|g| frames.contains(&g)))
                .collect();
            eligible.iter().step_by(stride).count()
        })
        .sum()
}

fn ingest(path: &Path, stride: usize) -> usize {
    let road = RoadSpec { lane_count: 2, ..Default::default() };
    ingest_ngsim(path, road, 50, stride, &IngestOptions::default()).unwrap().len()
}

#[test]
fn two_vehicles_hundred_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.csv");
    let presence = vec![(1, (1..=100).collect()), (2, (1..=100).collect())];
    write_csv(&path, &presence);
    // Each anchor needs its own frame plus 50 more: anchors 1..=50.
    assert_eq!(brute_force_count(&presence, 50, 1), 100);
    assert_eq!(ingest(&path, 1), 100);
}

#[test]
fn too_short_track_gives_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.csv");
    write_csv(&path, &[(1, (1..=49).collect())]);
    assert_eq!(ingest(&path, 1), 0);
}

#[test]
fn feet_are_converted() {
    assert!((328.084 * FEET_TO_METERS - 100.0).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn instance_count_matches_enumeration(
        len_a in 40i64..130,
        len_b in 40i64..130,
        start_b in 1i64..20,
        stride in 1usize..7,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let presence = vec![(1, (1..=len_a).collect()), (2, (start_b..start_b + len_b).collect())];
        write_csv(&path, &presence);
        prop_assert_eq!(ingest(&path, stride), brute_force_count(&presence, 50, stride));
    }
}

#[test]
fn synthetic_instances_respect_gap() {
    for seed in 0..3 {
        let cfg = small_config(seed);
        let instances = generate_synthetic(&cfg).unwrap();
        assert!(!instances.is_empty());
        for inst in &instances {
            let world = ReplayWorld::from_instance(inst);
            let gap = min_leader_gap(&inst.ego, &inst.ego_track, &world);
            assert!(gap >= cfg.gap_m - 1e-9, "{}: gap {gap}", inst.id);
        }
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_cache(&a, &generate_synthetic(&small_config(9)).unwrap()).unwrap();
    save_cache(&b, &generate_synthetic(&small_config(9)).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_cache(&a).unwrap(), generate_synthetic(&small_config(9)).unwrap());
}

#[test]
fn ngsim_round_trip_positions() {
    let cfg = small_config(4);
    let log = simulate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_ngsim(&log, &path).unwrap();
    let opts = IngestOptions::default();
    let direct = slice_instances(&log, cfg.horizon_steps(), cfg.stride, NeighborWindow::default(), CostWeights::default())
        .unwrap();
    let back = ingest_ngsim(&path, log.road, cfg.horizon_steps(), cfg.stride, &opts).unwrap();
    assert_eq!(direct.len(), back.len());
    let by_id: BTreeMap<_, _> = back.iter().map(|i| ((i.vehicle_id, i.anchor_frame), i)).collect();
    for a in &direct {
        let b = by_id[&(a.vehicle_id, a.anchor_frame)];
        for (p, q) in a.ego_track.iter().zip(&b.ego_track) {
            assert!((p.s - q.s).abs() < 1e-6 && (p.d - q.d).abs() < 1e-6);
        }
        assert_eq!(a.neighbor_tracks.len(), b.neighbor_tracks.len());
        for (x, y) in a.neighbor_tracks.iter().zip(&b.neighbor_tracks) {
            for (u, v) in x.states.iter().zip(&y.states) {
                assert!((u.s - v.s).abs() < 1e-6 && (u.d - v.d).abs() < 1e-6);
            }
        }
    }
}

/// Swapping the ego trajectory for any planner candidate leaves every
/// neighbor snapshot untouched.
#[test]
fn replay_ignores_ego_trajectory() {
    let instances = generate_synthetic(&small_config(2)).unwrap();
    let spec = SamplingSpec::default();
    for inst in instances.iter().take(100) {
        let cands = candidates(inst, &spec).unwrap();
        let (first, last) = (&cands[0], &cands[cands.len() - 1]);
        let mut a = inst.clone();
        a.ego_track = first.poses.clone();
        let mut b = inst.clone();
        b.ego_track = last.poses.clone();
        let (wa, wb) = (ReplayWorld::from_instance(&a), ReplayWorld::from_instance(&b));
        for k in 0..=spec.steps() {
            let frame = inst.anchor_frame + k as i64;
            assert_eq!(replay_step(&wa, frame).unwrap(), replay_step(&wb, frame).unwrap());
        }
        let stored: Vec<_> = inst.neighbor_tracks.iter().filter_map(|t| t.state_at(0).copied()).collect();
        assert_eq!(replay_step(&wa, inst.anchor_frame).unwrap(), stored.as_slice());
    }
}

#[test]
fn replay_outside_range_is_an_error() {
    let inst = &generate_synthetic(&small_config(2)).unwrap()[0];
    let w = ReplayWorld::from_instance(inst);
    assert!(replay_step(&w, inst.anchor_frame - 1).is_err());
    assert!(replay_step(&w, inst.anchor_frame + w.len() as i64).is_err());
}
