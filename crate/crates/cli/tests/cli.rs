use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tfm_core::tensor_io;

fn tfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfm"))
        .args(args)
        .output()
        .expect("spawn tfm")
}

fn ok(args: &[&str]) -> String {
    let out = tfm(args);
    assert!(
        out.status.success(),
        "tfm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tfm(args).status.code().expect("exit code")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn scene(dir: &Path) -> (String, String) {
    ok(&["synth", "--out-dir", &p(dir, "scene")]);
    (
        p(dir, "scene/trajectories.jsonl"),
        p(dir, "scene/poses.jsonl"),
    )
}

#[test]
fn extract_encode_fuse_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (traj, poses) = scene(d);
    let meta: serde_json::Value = serde_json::from_str(&ok(&[
        "extract",
        "--traj",
        &traj,
        "--poses",
        &poses,
        "--out",
        &p(d, "flow.json"),
        "--json",
    ]))
    .unwrap();
    assert!(meta["instances"].as_u64().unwrap() > 0);

    let enc: serde_json::Value = serde_json::from_str(&ok(&[
        "encode-temporal",
        "--flow",
        &p(d, "flow.json"),
        "--dim",
        "16",
        "--heads",
        "2",
        "--out",
        &p(d, "tf.tfm"),
        "--mask-out",
        &p(d, "mask.json"),
        "--json",
    ]))
    .unwrap();
    assert_eq!(enc["capacity"], 30);
    let tf = tensor_io::read_file(&PathBuf::from(p(d, "tf.tfm"))).unwrap();
    assert_eq!(tf[0].0, "tf_feat");
    assert_eq!(tf[0].1.shape(), (30, 16));

    ok(&[
        "lanes",
        "--rows",
        "5",
        "--dim",
        "16",
        "--out",
        &p(d, "lanes.tfm"),
    ]);
    for pipe in ["lt-ll", "all"] {
        ok(&[
            "fuse",
            "--lane",
            &p(d, "lanes.tfm"),
            "--flow",
            &p(d, "tf.tfm"),
            "--mask",
            &p(d, "mask.json"),
            "--pipe",
            pipe,
            "--heads",
            "2",
            "--zero-init",
            "--out",
            &p(d, "fused.tfm"),
        ]);
        let fused = tensor_io::read_file(&PathBuf::from(p(d, "fused.tfm"))).unwrap();
        let names: Vec<&str> = fused.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["f1", "f2", "f3", "f4", "l_feat_prime"]);
        let lanes = tensor_io::read_file(&PathBuf::from(p(d, "lanes.tfm"))).unwrap();
        // Zero-initialized modules and an identity transform pass lanes through.
        assert_eq!(fused[4].1, lanes[0].1);
    }
}

#[test]
fn run_writes_outputs_and_weights_reload() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (traj, poses) = scene(d);
    ok(&[
        "lanes",
        "--rows",
        "4",
        "--dim",
        "32",
        "--out",
        &p(d, "lanes.tfm"),
    ]);
    fs::write(p(d, "cfg.json"), r#"{"zero_init_output": false}"#).unwrap();
    let (cfg, lanes) = (p(d, "cfg.json"), p(d, "lanes.tfm"));
    let (a, b, w, diag) = (
        p(d, "a.tfm"),
        p(d, "b.tfm"),
        p(d, "w.tfm"),
        p(d, "diag.json"),
    );
    let base = [
        "run", "--config", &cfg, "--traj", &traj, "--poses", &poses, "--lane", &lanes,
    ];
    let mut first = base.to_vec();
    first.extend(["--out", &a, "--save-weights", &w, "--diag-out", &diag]);
    ok(&first);
    // Saved weights reproduce the run even under a different init seed.
    let mut second = base.to_vec();
    second.extend(["--seed", "99", "--weights", &w, "--out", &b]);
    ok(&second);
    assert_eq!(
        fs::read(p(d, "a.tfm")).unwrap(),
        fs::read(p(d, "b.tfm")).unwrap()
    );
    let diag: serde_json::Value =
        serde_json::from_slice(&fs::read(p(d, "diag.json")).unwrap()).unwrap();
    assert!(diag["valid_instances"].as_u64().unwrap() <= 30);
    assert!(diag.get("timings").is_none());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (traj, poses) = scene(d);
    assert_eq!(
        code(&[
            "extract",
            "--traj",
            &p(d, "missing.jsonl"),
            "--poses",
            &poses
        ]),
        2
    );
    fs::write(p(d, "bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        code(&["extract", "--traj", &p(d, "bad.jsonl"), "--poses", &poses]),
        2
    );
    assert_eq!(
        code(&["extract", "--traj", &traj, "--poses", &poses, "--range", "5,1,0,1"]),
        4
    );

    fs::write(p(d, "tole.json"), r#"{"tole_pts": 25}"#).unwrap();
    assert_eq!(code(&["config", "--check", &p(d, "tole.json")]), 4);
    fs::write(p(d, "typo.json"), r#"{"windw": 20}"#).unwrap();
    assert_eq!(code(&["config", "--check", &p(d, "typo.json")]), 2);

    let mut spec: serde_json::Value =
        serde_json::from_str(&ok(&["synth", "--default-spec"])).unwrap();
    spec["n_vehicles"] = 5000.into();
    fs::write(p(d, "crowded.json"), spec.to_string()).unwrap();
    assert_eq!(
        code(&[
            "synth",
            "--spec",
            &p(d, "crowded.json"),
            "--out-dir",
            &p(d, "x")
        ]),
        4
    );

    // h this large leaves second-order error far above tolerance.
    assert_eq!(code(&["gradcheck", "--step", "0.5"]), 3);

    ok(&[
        "lanes",
        "--rows",
        "3",
        "--dim",
        "8",
        "--out",
        &p(d, "narrow.tfm"),
    ]);
    assert_eq!(
        code(&[
            "run",
            "--traj",
            &traj,
            "--poses",
            &poses,
            "--lane",
            &p(d, "narrow.tfm"),
            "--out",
            &p(d, "o.tfm")
        ]),
        2
    );
}

#[test]
fn config_defaults_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["config", "--default"]);
    let path = p(dir.path(), "c.json");
    fs::write(&path, &text).unwrap();
    assert_eq!(ok(&["config", "--check", &path]), text);
    let exp = ok(&["config", "--default", "--experiment"]);
    let path = p(dir.path(), "e.json");
    fs::write(&path, &exp).unwrap();
    assert_eq!(ok(&["config", "--check", &path, "--experiment"]), exp);
}

#[test]
fn dataset_mode_writes_one_directory_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        p(dir.path(), "e.json"),
        r#"{"train_scenes": 3, "test_scenes": 2}"#,
    )
    .unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(&[
        "synth",
        "--dataset",
        "--config",
        &p(dir.path(), "e.json"),
        "--out-dir",
        &p(dir.path(), "ds"),
        "--json",
    ]))
    .unwrap();
    assert_eq!(out["scenes"].as_array().unwrap().len(), 5);
    assert!(dir.path().join("ds/scene_004/scene.json").exists());
}
