//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and printed as
//! FAIL, but do not fail the process. Any other failure does, and so does a
//! known failure that starts passing, so the list cannot go stale.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfm_core::experiment::{generate_dataset, run_experiment, ExperimentConfig};
use tfm_core::flow_extract::{clip_to_range, parse_log, Category, RangeSpec};
use tfm_core::geometry::{compose_relative, PointBEV, RigidPose};
use tfm_core::gradcheck_suite;
use tfm_core::neural::{attention_forward, BoolGrid, MaskedBlock, ParamStore, Tensor2D};
use tfm_core::scenesynth::{flow_occupancy_oracle, generate, SceneSpec};
use tfm_core::spatial_enc::{
    build_spatial_mask, Composer, Fuser, FusionConfig, Pipe, QueryParadigm,
};
use tfm_core::temporal_enc::{
    empty_batch, select_instances, validity_filter, Candidate, TemporalEncoder,
    TemporalEncoderConfig,
};

const KNOWN_FAILURES: &[&str] = &["gradient-checks", "desk-scale-orderings"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn bits(t: &Tensor2D) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

type M = [[f64; 3]; 3];

fn matmul(a: &M, b: &M) -> M {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_inverse(m: &M) -> M {
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let (tx, ty) = (m[0][2], m[1][2]);
    [
        [a, c, -(a * tx + c * ty)],
        [b, d, -(b * tx + d * ty)],
        [0.0, 0.0, 1.0],
    ]
}

fn geometry_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20_000);
    let (mut compose_err, mut trip_err) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let mut pose = || {
            RigidPose::new(
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-PI..PI),
            )
        };
        let (now, past) = (pose(), pose());
        let q = PointBEV::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        );
        let rel = compose_relative(&now, &past);
        let oracle = matmul(&mat_inverse(&now.to_matrix()), &past.to_matrix());
        let m = rel.to_matrix();
        for i in 0..2 {
            for j in 0..3 {
                compose_err = compose_err.max((m[i][j] - oracle[i][j]).abs());
            }
        }
        let back = rel.inverse().apply(rel.apply(q));
        trip_err = trip_err.max((back.x - q.x).abs()).max((back.y - q.y).abs());
    }
    verdict(
        compose_err < 1e-9 && trip_err < 1e-9,
        format!("10000 cases, max composition error {compose_err:.2e}, max round-trip error {trip_err:.2e} (tol 1e-9)"),
    )
}

fn hand_case() -> Verdict {
    let poses: String = (0..=3)
        .map(|f| {
            format!(
                "{{\"frame\":{f},\"t\":{},\"x\":{f}.0,\"y\":0.0,\"yaw\":0.0}}\n",
                f as f64 * 0.1
            )
        })
        .collect();
    let traj: String = (0..3)
        .map(|f| format!("{{\"frame\":{f},\"id\":\"a\",\"cat\":\"vehicle\",\"x\":0.0,\"y\":0.0,\"occluded\":false}}\n"))
        .collect();
    let flow = parse_log(traj.as_bytes(), poses.as_bytes(), 3, 3)
        .unwrap()
        .flow;
    let got: Vec<(f64, f64)> = flow.instances[0]
        .slots
        .iter()
        .map(|s| s.map_or((f64::NAN, f64::NAN), |s| (s.center.x, s.center.y)))
        .collect();
    verdict(
        got == [(-1.0, 0.0), (-2.0, 0.0), (-3.0, 0.0)],
        format!("warped centers {got:?}"),
    )
}

fn temporal_validity() -> Verdict {
    use tfm_core::flow_extract::{FlowFrameSet, FlowInstance, FlowSlot};
    let mut mismatches = 0;
    for tole in [1, 5, 12] {
        for pattern in 0u32..1 << 12 {
            let slots = (0..12)
                .map(|k| {
                    (pattern >> k & 1 == 1).then(|| FlowSlot {
                        center: PointBEV::new(k as f64, 1.0),
                        occluded: false,
                    })
                })
                .collect();
            let flow = FlowFrameSet {
                current_frame: 50,
                window: 12,
                instances: vec![FlowInstance {
                    track_id: "p".into(),
                    category: Category::Vehicle,
                    slots,
                }],
            };
            let kept = validity_filter(&flow, tole, 12).unwrap().len() == 1;
            if kept != (pattern.count_ones() as usize >= tole) {
                mismatches += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("3 x 4096 patterns, {mismatches} mismatches"),
    )
}

fn mask_suite() -> Verdict {
    const N: usize = 200;
    const DIM: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(30_000);
    let mut failures = [0usize; 4];

    let enc = TemporalEncoder::new(TemporalEncoderConfig {
        dim: DIM,
        heads: 2,
        ffn_dim: 16,
        frames: 6,
        normalize_coords: true,
        range: RangeSpec::default(),
    });
    let mut enc_store = ParamStore::new(1);
    enc.register(&mut enc_store).unwrap();

    for case in 0..N {
        // Padding invariance.
        let n_real = rng.random_range(0..5);
        let cands: Vec<Candidate> = (0..n_real)
            .map(|i| {
                let mut frames: Vec<Option<PointBEV>> = (0..6)
                    .map(|_| {
                        rng.random_bool(0.6).then(|| {
                            PointBEV::new(
                                rng.random_range(-50.0..50.0),
                                rng.random_range(-25.0..25.0),
                            )
                        })
                    })
                    .collect();
                frames[0] = Some(PointBEV::new(3.0, 1.0));
                Candidate {
                    track_id: format!("c{i}"),
                    category: Category::ALL[i % 4],
                    frames,
                }
            })
            .collect();
        let weights: Vec<f64> = (0..n_real).map(|_| rng.random_range(0.0..1.0)).collect();
        let (mut batch, tmask) = if n_real == 0 {
            empty_batch(6, 6)
        } else {
            select_instances(&cands, &weights, 6).unwrap()
        };
        let before = enc.encode(&enc_store, &batch, &tmask).unwrap().tf_feat;
        for slot in batch.slots.iter_mut().filter(|s| !s.instance_valid) {
            slot.category = Category::ALL[rng.random_range(0..4)];
            for k in 0..6 {
                slot.centers[k] =
                    PointBEV::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
                slot.valid[k] = rng.random_bool(0.5);
            }
        }
        if bits(&enc.encode(&enc_store, &batch, &tmask).unwrap().tf_feat) != bits(&before) {
            failures[0] += 1;
        }

        // Masked-token invariance, at block level and through the fusion stack.
        let block = MaskedBlock::new("b", DIM, 2, 16);
        let mut store = ParamStore::new(case as u64);
        block.register(&mut store, false).unwrap();
        let (nq, nk) = (rng.random_range(1..6), rng.random_range(1..6));
        let xq = uniform(&mut rng, nq, DIM);
        let mut xkv = uniform(&mut rng, nk, DIM);
        let p = rng.random_range(0.0..1.0);
        let cells: Vec<bool> = (0..nq * nk).map(|_| rng.random_bool(p)).collect();
        let mask = BoolGrid::from_fn(nq, nk, |r, c| cells[r * nk + c]);
        let (b0, _) = block.forward(&store, &xq, &xkv, &mask).unwrap();
        for j in (0..nk).filter(|&j| (0..nq).all(|i| !mask.get(i, j))) {
            xkv.row_mut(j)
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1e3..1e3));
        }
        let (b1, _) = block.forward(&store, &xq, &xkv, &mask).unwrap();

        let pipe = if rng.random_bool(0.5) {
            Pipe::All
        } else {
            Pipe::LtLl
        };
        let fuser = Fuser::new(FusionConfig {
            pipe,
            heads: 2,
            dim: DIM,
            ..FusionConfig::default()
        })
        .unwrap();
        let mut fstore = ParamStore::new(case as u64 + 1);
        fuser.register(&mut fstore, false).unwrap();
        let (lanes, flow) = (rng.random_range(1..5), rng.random_range(0..6));
        let valid: Vec<bool> = (0..flow).map(|_| rng.random_bool(0.5)).collect();
        let smask = build_spatial_mask(lanes, &valid, None).unwrap();
        let l = uniform(&mut rng, lanes, DIM);
        let mut t = uniform(&mut rng, flow, DIM);
        let s0 = fuser.fuse(&fstore, &l, &t, &smask).unwrap();
        for r in (0..flow).filter(|&r| !valid[r]) {
            t.row_mut(r)
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1e3..1e3));
        }
        let s1 = fuser.fuse(&fstore, &l, &t, &smask).unwrap();
        if bits(&b0) != bits(&b1) || bits(s0.final_lane_update()) != bits(s1.final_lane_update()) {
            failures[1] += 1;
        }

        // Block isolation: no lane-to-flow links under LT_LL.
        let lt = Fuser::new(FusionConfig {
            pipe: Pipe::LtLl,
            heads: 2,
            dim: DIM,
            ..FusionConfig::default()
        })
        .unwrap();
        let composer = Composer::new(DIM);
        let mut lstore = ParamStore::new(case as u64 + 2);
        lt.register(&mut lstore, false).unwrap();
        composer.register(&mut lstore).unwrap();
        let iso = build_spatial_mask(lanes, &vec![false; flow.max(1)], None).unwrap();
        let outs: Vec<Vec<u64>> = (0..2)
            .map(|_| {
                let t = uniform(&mut rng, flow.max(1), DIM);
                let st = lt.fuse(&lstore, &l, &t, &iso).unwrap();
                bits(
                    &composer
                        .compose(
                            &lstore,
                            st.final_lane_update(),
                            &l,
                            QueryParadigm::PointLevel,
                        )
                        .unwrap(),
                )
            })
            .collect();
        if outs[0] != outs[1] {
            failures[2] += 1;
        }

        // Fully masked query rows: zero attention output, residual passthrough.
        let (q, k, v) = (
            uniform(&mut rng, nq, DIM),
            uniform(&mut rng, nk, DIM),
            uniform(&mut rng, nk, DIM),
        );
        let (att, _) = attention_forward(&q, &k, &v, &mask, 2).unwrap();
        let dead: Vec<usize> = (0..nq).filter(|&i| !mask.row_active(i)).collect();
        if dead
            .iter()
            .any(|&i| att.row(i).iter().any(|&x| x != 0.0) || b1.row(i) != xq.row(i))
        {
            failures[3] += 1;
        }
    }
    let names = [
        "padding",
        "masked-token",
        "block-isolation",
        "fully-masked-row",
    ];
    let detail = names
        .iter()
        .zip(&failures)
        .map(|(n, f)| format!("{n} {}/{N}", N - f))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(failures.iter().all(|&f| f == 0), detail)
}

fn gradient_checks() -> Verdict {
    let outcomes = gradcheck_suite::run_all(0, 1e-3);
    let worst = outcomes
        .iter()
        .map(|o| o.report.max_rel_error)
        .fold(0.0, f64::max);
    let failing: Vec<String> = outcomes
        .iter()
        .filter(|o| o.report.max_rel_error.is_nan() || o.report.max_rel_error >= 1e-4)
        .map(|o| format!("{} {:.2e}", o.name, o.report.max_rel_error))
        .collect();
    let detail = if failing.is_empty() {
        format!(
            "{} checks at seed 0, h=1e-3, max relative error {worst:.2e} (tol 1e-4)",
            outcomes.len()
        )
    } else {
        format!(
            "{} checks at seed 0, h=1e-3, tol 1e-4; above tolerance: {}",
            outcomes.len(),
            failing.join(", ")
        )
    };
    verdict(failing.is_empty(), detail)
}

fn composition_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40_000);
    let (mut exact, mut worst) = (0usize, 0.0f64);
    for _ in 0..100 {
        let (rows, dim) = (rng.random_range(1..32), rng.random_range(1..48));
        let c = Composer::new(dim);
        let mut identity = ParamStore::new(0);
        c.register(&mut identity).unwrap();
        let mut random = identity.clone();
        *random.get_mut("compose.transform.weight").unwrap() = uniform(&mut rng, dim, dim);
        *random.get_mut("compose.transform.bias").unwrap() = uniform(&mut rng, 1, dim);
        let f4 = uniform(&mut rng, rows, dim);
        let l = uniform(&mut rng, rows, dim);
        let inst = c
            .compose(&random, &f4, &l, QueryParadigm::InstanceBased)
            .unwrap();
        let mapped = c.transform().forward(&random, &f4).unwrap();
        if bits(&inst) == bits(&mapped) {
            exact += 1;
        }
        let point = c
            .compose(&identity, &f4, &l, QueryParadigm::PointLevel)
            .unwrap();
        worst = worst.max(point.max_abs_diff(&f4.add(&l).unwrap()));
    }
    verdict(
        exact == 100 && worst < 1e-12,
        format!("100 shapes, instance_based exact {exact}/100, point_level max error {worst:.2e} (tol 1e-12)"),
    )
}

fn occupancy_oracle() -> Verdict {
    let mut precisions = Vec::new();
    for seed in 0..20 {
        let scene = generate(&SceneSpec::sample_road(seed, 0.2, 0.05)).unwrap();
        let nav = &scene.truth.navigable;
        let flow = parse_log(
            scene.trajectory_jsonl().as_bytes(),
            scene.pose_jsonl().as_bytes(),
            scene.current_frame(),
            20,
        )
        .unwrap()
        .flow;
        let occ = flow_occupancy_oracle(&clip_to_range(&flow, &nav.range), &nav.range, nav.cell);
        if let Some(p) = occ.vehicle.precision_against(nav) {
            precisions.push(p);
        }
    }
    let min = precisions.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        precisions.len() == 20 && min >= 0.95,
        format!(
            "{} scenes with vehicle cells, min precision {min:.4} (threshold 0.95)",
            precisions.len()
        ),
    )
}

fn desk_scale_orderings() -> Verdict {
    let cfg = ExperimentConfig::default();
    let scenes = generate_dataset(&cfg).unwrap();
    let report = run_experiment(&cfg, &scenes).unwrap();
    let m = &report.median;
    let tw = m.train_with_infer_without.expect("evaluated by default");
    let a = m.with_flow <= m.without_flow;
    let b = tw <= m.baseline;
    verdict(
        a && b && report.seeds.len() >= 5,
        format!(
            "{} seeds, median with-flow {:.4} <= without-flow {:.4}: {}; train-with/infer-without {:.4} <= never-with-flow {:.4}: {}",
            report.seeds.len(),
            m.with_flow,
            m.without_flow,
            if a { "yes" } else { "no" },
            tw,
            m.baseline,
            if b { "yes" } else { "no" }
        ),
    )
}

fn tfm(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_tfm"))
        .args(args)
        .output()
        .expect("spawn tfm");
    assert!(
        status.status.success(),
        "tfm {args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    tfm(&["synth", "--out-dir", &d("scene")]);
    tfm(&[
        "lanes",
        "--rows",
        "6",
        "--dim",
        "32",
        "--seed",
        "5",
        "--out",
        &d("lanes.tfm"),
    ]);
    fs::write(
        d("config.json"),
        r#"{"zero_init_output": false, "seed": 3}"#,
    )
    .unwrap();
    for run in ["a", "b"] {
        tfm(&[
            "run",
            "--config",
            &d("config.json"),
            "--traj",
            &d("scene/trajectories.jsonl"),
            "--poses",
            &d("scene/poses.jsonl"),
            "--lane",
            &d("lanes.tfm"),
            "--out",
            &d(&format!("{run}/out.tfm")),
            "--diag-out",
            &d(&format!("{run}/diag.json")),
            "--save-weights",
            &d(&format!("{run}/weights.tfm")),
        ]);
    }
    let files = ["out.tfm", "diag.json", "weights.tfm"];
    let same = files
        .iter()
        .filter(|f| {
            fs::read(Path::new(&d("a")).join(f)).unwrap()
                == fs::read(Path::new(&d("b")).join(f)).unwrap()
        })
        .count();
    let lanes = fs::read(d("lanes.tfm")).unwrap();
    let changed = fs::read(d("a/out.tfm")).unwrap() != lanes;
    verdict(
        same == files.len() && changed,
        format!(
            "{same}/{} output files byte-identical across two runs",
            files.len()
        ),
    )
}

/// Name, runtime budget in seconds, check.
type Criterion = (&'static str, Option<f64>, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("geometry-oracle", Some(5.0), geometry_oracle),
        ("warp-hand-case", None, hand_case),
        ("temporal-validity", Some(1.0), temporal_validity),
        ("mask-semantics", Some(30.0), mask_suite),
        ("gradient-checks", Some(60.0), gradient_checks),
        ("composition-contract", None, composition_contract),
        ("flow-occupancy-oracle", Some(30.0), occupancy_oracle),
        ("desk-scale-orderings", Some(600.0), desk_scale_orderings),
        ("determinism", None, determinism),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let in_time = budget.is_none_or(|b| secs < b);
        let pass = v.pass && in_time;
        let timing = match budget {
            Some(b) => format!("{secs:.2} s, budget {b} s"),
            None => format!("{secs:.2} s"),
        };
        let known = KNOWN_FAILURES.contains(&name);
        let note = if !pass && known {
            " [known failure]"
        } else {
            ""
        };
        println!(
            "{} {name}: {} ({timing}){note}",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        passed += usize::from(pass);
        if pass == known {
            unexpected.push(name);
        }
    }
    println!("{passed}/{} criteria pass", criteria.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected outcome for: {}", unexpected.join(", "));
        ExitCode::FAILURE
    }
}
