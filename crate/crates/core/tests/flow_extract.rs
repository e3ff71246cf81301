use std::collections::BTreeMap;

use proptest::prelude::*;
use tfm_core::flow_extract::{
    build_flow, clip_to_range, parse_log, read_observations, read_poses, FlowInstance, FlowSlot,
    ObjectObservation, RangeSpec,
};
use tfm_core::geometry::compose_relative;

#[derive(Debug, Clone)]
struct Log {
    poses: String,
    traj: String,
    /// Records whose frame falls outside `[current - window, current - 1]`.
    expected_out_of_window: usize,
    current: i64,
    window: usize,
}

const CATS: [&str; 5] = ["vehicle", "pedestrian", "cyclist", "other", "bus"];

fn log() -> impl Strategy<Value = Log> {
    (
        1usize..12,
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.2f64..3.2), 16),
        prop::collection::btree_set((0usize..6, 0i64..16), 0..60),
        prop::collection::vec((-80.0f64..80.0, -40.0f64..40.0, any::<bool>()), 96),
    )
        .prop_map(|(window, steps, keys, vals)| {
            let current = 15;
            let mut x = 0.0;
            let mut y = 0.0;
            let mut yaw = 0.0;
            let mut poses = String::new();
            for (f, (dx, dy, dyaw)) in steps.iter().enumerate() {
                x += dx;
                y += dy;
                yaw += dyaw * 0.1;
                poses += &format!(
                    "{{\"frame\":{f},\"t\":{},\"x\":{x},\"y\":{y},\"yaw\":{yaw}}}\n",
                    f as f64 * 0.1
                );
            }
            let mut traj = String::new();
            let mut out = 0;
            for (n, (track, frame)) in keys.iter().enumerate() {
                let (px, py, occ) = vals[n];
                let off = current - frame;
                if off < 1 || off > window as i64 {
                    out += 1;
                }
                traj += &format!(
                    "{{\"frame\":{frame},\"id\":\"t{track}\",\"cat\":\"{}\",\"x\":{px},\"y\":{py},\"occluded\":{occ}}}\n",
                    CATS[track % CATS.len()]
                );
            }
            Log { poses, traj, expected_out_of_window: out, current, window }
        })
}

fn range() -> impl Strategy<Value = RangeSpec> {
    (-60.0f64..0.0, 1.0f64..80.0, -30.0f64..0.0, 1.0f64..40.0)
        .prop_map(|(x0, w, y0, h)| RangeSpec::new(x0, x0 + w, y0, y0 + h).unwrap())
}

/// Warps every observation on its own, then groups: the opposite order to
/// `build_flow`.
fn warp_then_group(
    obs: &[ObjectObservation],
    poses: &BTreeMap<i64, tfm_core::geometry::RigidPose>,
    current: i64,
    window: usize,
) -> Vec<FlowInstance> {
    let now = poses[&current];
    let warped: Vec<(ObjectObservation, i64)> = obs
        .iter()
        .filter_map(|o| {
            let off = current - o.frame;
            (1..=window as i64).contains(&off).then(|| {
                let mut w = o.clone();
                w.center = compose_relative(&now, &poses[&o.frame]).apply(o.center);
                (w, off)
            })
        })
        .collect();
    let mut groups: BTreeMap<String, FlowInstance> = BTreeMap::new();
    for (o, off) in warped {
        let inst = groups
            .entry(o.track_id.clone())
            .or_insert_with(|| FlowInstance {
                track_id: o.track_id.clone(),
                category: o.category,
                slots: vec![None; window],
            });
        inst.slots[(off - 1) as usize] = Some(FlowSlot {
            center: o.center,
            occluded: o.occluded,
        });
    }
    groups.into_values().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clipping_is_idempotent(l in log(), r in range()) {
        let flow = parse_log(l.traj.as_bytes(), l.poses.as_bytes(), l.current, l.window as i64).unwrap().flow;
        let once = clip_to_range(&flow, &r);
        prop_assert_eq!(clip_to_range(&once, &r), once.clone());
        for inst in &once.instances {
            prop_assert!(inst.observed() > 0);
            for s in inst.slots.iter().flatten() {
                prop_assert!(r.contains(s.center));
            }
        }
    }

    #[test]
    fn grouping_order_does_not_matter(l in log(), seed in any::<u64>()) {
        let poses = read_poses(l.poses.as_bytes()).unwrap();
        let (mut obs, _) = read_observations(l.traj.as_bytes()).unwrap();
        let (flow, _) = build_flow(&obs, &poses, l.current, l.window).unwrap();
        prop_assert_eq!(&flow.instances, &warp_then_group(&obs, &poses, l.current, l.window));
        let n = obs.len();
        if n > 1 {
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                obs.swap(i, (s >> 33) as usize % (i + 1));
            }
        }
        let (shuffled, _) = build_flow(&obs, &poses, l.current, l.window).unwrap();
        prop_assert_eq!(shuffled, flow);
    }

    #[test]
    fn record_counts_are_conserved(l in log()) {
        let parsed = parse_log(l.traj.as_bytes(), l.poses.as_bytes(), l.current, l.window as i64).unwrap();
        let s = parsed.stats;
        prop_assert_eq!(s.records, l.traj.lines().count());
        prop_assert_eq!(s.out_of_window, l.expected_out_of_window);
        prop_assert_eq!(s.parsed, s.records - s.out_of_window);
        prop_assert_eq!(s.unknown_categories, l.traj.matches("\"bus\"").count());
    }
}
