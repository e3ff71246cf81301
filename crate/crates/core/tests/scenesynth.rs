use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use tfm_core::flow_extract::{
    clip_to_range, parse_log, Category, FlowFrameSet, FlowInstance, FlowSlot, RangeSpec,
};
use tfm_core::geometry::PointBEV;
use tfm_core::scenesynth::{
    flow_occupancy_oracle, generate, LaneSpec, OccupancyGrid, Polyline, Scene, SceneSpec,
    SynthError,
};
use tfm_core::temporal_enc::{select_instances, validity_filter, SectorWeighting};

fn flow_of(scene: &Scene, window: i64) -> FlowFrameSet {
    parse_log(
        scene.trajectory_jsonl().as_bytes(),
        scene.pose_jsonl().as_bytes(),
        scene.current_frame(),
        window,
    )
    .expect("generator output parses")
    .flow
}

/// One straight lane inside a widened sensor range, parked vehicles and a
/// parked ego, so every track stays visible for the whole scene.
/// Pedestrians wander and may leave the range, so there are none.
fn parked_spec() -> SceneSpec {
    SceneSpec {
        lanes: vec![LaneSpec {
            points: vec![[-100.0, 0.0], [100.0, 0.0]],
            width: 3.5,
        }],
        n_vehicles: 6,
        n_pedestrians: 0,
        occlusion_rate: 0.0,
        frame_drop_rate: 0.0,
        ego_path: vec![[0.0, 10.0]],
        vehicle_speed: [0.0, 0.0],
        range: RangeSpec::new(-120.0, 120.0, -30.0, 30.0).unwrap(),
        ..SceneSpec::default()
    }
}

#[test]
fn zero_rates_observe_every_frame() {
    let spec = parked_spec();
    let scene = generate(&spec).unwrap();
    let mut per_track: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &scene.trajectories {
        assert!(!r.occluded);
        *per_track.entry(&r.id).or_default() += 1;
    }
    assert_eq!(per_track.len(), 6);
    assert!(
        per_track.values().all(|&n| n == spec.frames),
        "{per_track:?}"
    );
}

#[test]
fn zero_rates_emit_every_visible_state() {
    for seed in 0..5 {
        let spec = SceneSpec::sample_road(seed, 0.0, 0.0);
        let scene = generate(&spec).unwrap();
        assert!(!scene.trajectories.is_empty());
        assert!(scene.truth.objects.iter().all(|o| !o.occluded));
        let emitted = scene.truth.objects.iter().filter(|o| o.emitted).count();
        assert_eq!(emitted, scene.trajectories.len());
    }
}

#[test]
fn empty_scene_has_poses_only() {
    let spec = SceneSpec {
        n_vehicles: 0,
        n_pedestrians: 0,
        ..SceneSpec::default()
    };
    let scene = generate(&spec).unwrap();
    assert!(scene.trajectories.is_empty());
    assert!(scene.trajectory_jsonl().is_empty());
    assert_eq!(scene.poses.len(), spec.frames);
    for (f, p) in scene.poses.iter().enumerate() {
        assert_eq!(p.frame, f as i64);
        assert!(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite());
    }
    let flow = flow_of(&scene, 20);
    assert!(flow.instances.is_empty());
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = SceneSpec::sample_road(7, 0.4, 0.1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&spec).unwrap().write_to(a.path()).unwrap();
    generate(&spec).unwrap().write_to(b.path()).unwrap();
    let names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names.len(), 5);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
}

#[test]
fn spec_round_trips_through_json() {
    let spec = SceneSpec::sample_road(3, 0.25, 0.05);
    let text = serde_json::to_string(&spec).unwrap();
    let back: SceneSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    let typo = text.replacen("\"seed\"", "\"sead\"", 1);
    assert!(serde_json::from_str::<SceneSpec>(&typo).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SceneSpec::default();
    let cases = [
        SceneSpec {
            occlusion_rate: 1.5,
            ..base.clone()
        },
        SceneSpec {
            frame_drop_rate: -0.1,
            ..base.clone()
        },
        SceneSpec {
            frames: 20,
            ..base.clone()
        },
        SceneSpec {
            lanes: vec![LaneSpec {
                points: vec![[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0]],
                width: 3.5,
            }],
            ..base.clone()
        },
        SceneSpec {
            ego_path: vec![],
            ..base.clone()
        },
    ];
    for spec in cases {
        assert!(
            matches!(generate(&spec), Err(SynthError::InvalidSpec(_))),
            "{spec:?}"
        );
    }
}

#[test]
fn too_many_vehicles_is_infeasible() {
    let spec = SceneSpec::default();
    let capacity = spec.lane_capacity();
    assert_eq!(capacity, 2 * 50);
    let ok = SceneSpec {
        n_vehicles: capacity,
        ..spec.clone()
    };
    assert!(generate(&ok).is_ok());
    let over = SceneSpec {
        n_vehicles: capacity + 1,
        ..spec
    };
    assert!(matches!(generate(&over), Err(SynthError::Infeasible(_))));
}

#[test]
fn vehicles_keep_min_spacing_per_lane() {
    let spec = SceneSpec {
        n_vehicles: 60,
        lateral_noise: 0.0,
        ..SceneSpec::default()
    };
    let scene = generate(&spec).unwrap();
    let mut by_frame: BTreeMap<i64, Vec<PointBEV>> = BTreeMap::new();
    for o in scene
        .truth
        .objects
        .iter()
        .filter(|o| o.cat == Category::Vehicle)
    {
        by_frame.entry(o.frame).or_default().push(o.world);
    }
    for pts in by_frame.values() {
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                if (a.y - b.y).abs() < 1e-9 {
                    assert!(a.distance(b) >= spec.min_spacing - 1e-9);
                }
            }
        }
    }
}

#[test]
fn vehicles_sit_in_navigable_cells_and_pedestrians_do_not() {
    for seed in 0..10 {
        let spec = SceneSpec::sample_road(seed, 0.3, 0.1);
        let scene = generate(&spec).unwrap();
        let grid = &scene.truth.navigable;
        assert_eq!((grid.nx, grid.ny), (200, 100));
        for o in &scene.truth.objects {
            let Some((ix, iy)) = grid.cell_of(o.current) else {
                continue;
            };
            match o.cat {
                Category::Vehicle => assert!(grid.get(ix, iy), "seed {seed} {o:?}"),
                Category::Pedestrian => assert!(!grid.get(ix, iy), "seed {seed} {o:?}"),
                _ => unreachable!(),
            }
        }
    }
}

#[test]
fn lateral_offset_stays_inside_half_width() {
    let spec = SceneSpec {
        lateral_noise: 0.39,
        ..SceneSpec::sample_road(11, 0.0, 0.0)
    };
    let scene = generate(&spec).unwrap();
    let lanes: Vec<Polyline> = spec
        .lanes
        .iter()
        .map(|l| Polyline::new(&l.points).unwrap())
        .collect();
    for o in scene
        .truth
        .objects
        .iter()
        .filter(|o| o.cat == Category::Vehicle)
    {
        let d = lanes
            .iter()
            .map(|l| l.distance(o.world))
            .fold(f64::INFINITY, f64::min);
        assert!(d < 3.5 / 2.0, "{o:?} is {d} m off");
    }
}

#[test]
fn oracle_marks_exactly_the_traversed_cells() {
    let range = RangeSpec::default();
    // A vehicle driving along y = 0.25 from x = -49.75 to 49.75, newest
    // observation in slot 0.
    let xs: Vec<f64> = (0..21).map(|k| 49.75 - 4.975 * k as f64).collect();
    let inst = FlowInstance {
        track_id: "v".into(),
        category: Category::Vehicle,
        slots: xs
            .iter()
            .map(|&x| {
                Some(FlowSlot {
                    center: PointBEV::new(x, 0.25),
                    occluded: false,
                })
            })
            .collect(),
    };
    let flow = FlowFrameSet {
        current_frame: 21,
        window: 21,
        instances: vec![inst],
    };
    let occ = flow_occupancy_oracle(&flow, &range, 0.5);
    let marked: BTreeSet<(usize, usize)> = (0..occ.vehicle.nx)
        .flat_map(|ix| (0..occ.vehicle.ny).map(move |iy| (ix, iy)))
        .filter(|&(ix, iy)| occ.vehicle.get(ix, iy))
        .collect();
    let expected: BTreeSet<(usize, usize)> = (0..200).map(|ix| (ix, 50)).collect();
    assert_eq!(marked, expected);
    assert!(occ.pedestrian.is_empty());
}

#[test]
fn oracle_diagonal_segment_is_connected() {
    let mut g = OccupancyGrid::new(RangeSpec::default(), 0.5);
    let (a, b) = (PointBEV::new(-10.1, -10.3), PointBEV::new(10.2, 9.9));
    g.mark_segment(a, b);
    let cells: BTreeSet<(usize, usize)> = (0..g.nx)
        .flat_map(|ix| (0..g.ny).map(move |iy| (ix, iy)))
        .filter(|&(ix, iy)| g.get(ix, iy))
        .collect();
    assert!(cells.contains(&g.cell_of(a).unwrap()));
    assert!(cells.contains(&g.cell_of(b).unwrap()));
    // A 4-connected walk: |dx| + |dy| cells plus the start.
    let (ax, ay) = g.cell_of(a).unwrap();
    let (bx, by) = g.cell_of(b).unwrap();
    assert_eq!(cells.len(), bx.abs_diff(ax) + by.abs_diff(ay) + 1);
    for &(x, y) in &cells {
        let neighbours = [
            (x + 1, y),
            (x, y + 1),
            (x.wrapping_sub(1), y),
            (x, y.wrapping_sub(1)),
        ];
        assert!(neighbours.iter().any(|n| cells.contains(n)));
    }
}

#[test]
fn oracle_on_empty_flow_is_empty() {
    let occ = flow_occupancy_oracle(&FlowFrameSet::empty(5, 5), &RangeSpec::default(), 0.5);
    assert!(occ.vehicle.is_empty() && occ.pedestrian.is_empty());
    assert_eq!(occ.vehicle.precision_against(&occ.pedestrian), None);
}

#[test]
fn oracle_splits_pedestrians_and_skips_occluded() {
    let slot = |x: f64, occluded| {
        Some(FlowSlot {
            center: PointBEV::new(x, 5.0),
            occluded,
        })
    };
    let flow = FlowFrameSet {
        current_frame: 3,
        window: 3,
        instances: vec![
            FlowInstance {
                track_id: "p".into(),
                category: Category::Pedestrian,
                slots: vec![slot(1.0, false), None, None],
            },
            FlowInstance {
                track_id: "v".into(),
                category: Category::Vehicle,
                slots: vec![slot(20.0, true), None, None],
            },
        ],
    };
    let occ = flow_occupancy_oracle(&flow, &RangeSpec::default(), 0.5);
    assert_eq!(occ.pedestrian.count(), 1);
    assert!(occ.vehicle.is_empty());
}

#[test]
fn pgm_header_and_orientation() {
    let mut g = OccupancyGrid::new(RangeSpec::new(0.0, 2.0, 0.0, 1.0).unwrap(), 0.5);
    g.mark_point(PointBEV::new(1.9, 0.9));
    let bytes = g.to_pgm();
    let header = b"P5\n2 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 8);
    // Far-forward, far-left cell is the top-left pixel.
    assert_eq!(pixels[0], 255);
    assert_eq!(pixels.iter().filter(|p| **p == 255).count(), 1);
}

#[test]
fn polyline_geometry() {
    let p = Polyline::new(&[[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
    assert_eq!(p.length(), 20.0);
    assert_eq!(p.point_at(15.0), PointBEV::new(10.0, 5.0));
    assert_eq!(p.point_at(-3.0), PointBEV::new(0.0, 0.0));
    assert!((p.heading_at(12.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert_eq!(p.distance(PointBEV::new(5.0, 3.0)), 3.0);
    assert!(!p.self_intersects());
    assert!(Polyline::new(&[[0.0, 0.0]]).is_err());
    assert!(Polyline::new(&[[0.0, 0.0], [0.0, 0.0]]).is_err());
}

fn valid_bits(scene: &Scene, t_max: usize) -> usize {
    let flow = clip_to_range(&flow_of(scene, 20), &scene.spec.range);
    let cands = validity_filter(&flow, 5, 20).unwrap();
    let sector = SectorWeighting::for_range(&scene.spec.range);
    let weights: Vec<f64> = cands.iter().map(|c| sector.instance_weight(c)).collect();
    let (_, mask) = select_instances(&cands, &weights, t_max).unwrap();
    mask.bits.count_true()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn occlusion_is_nested_in_rate(seed in 0u64..500, lo in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let hi = (lo + extra).min(1.0);
        let a = generate(&SceneSpec::sample_road(seed, lo, 0.1)).unwrap();
        let b = generate(&SceneSpec::sample_road(seed, hi, 0.1)).unwrap();
        prop_assert_eq!(a.trajectories.len(), b.trajectories.len());
        for (ra, rb) in a.trajectories.iter().zip(&b.trajectories) {
            prop_assert_eq!((&ra.id, ra.frame, ra.x, ra.y), (&rb.id, rb.frame, rb.x, rb.y));
            prop_assert!(!ra.occluded || rb.occluded);
        }
        // With capacity for every track, valid mask bits can only drop.
        prop_assert!(valid_bits(&b, 64) <= valid_bits(&a, 64));
    }
}
