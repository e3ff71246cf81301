//! `tfm`: command-line front end.
//!
//! Exit codes: 0 success, 2 input or parse error, 3 numeric failure,
//! 4 infeasible configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use tfm_core::experiment::{self, ExperimentConfig, ExperimentError};
use tfm_core::flow_extract::{clip_to_range, parse_log, FlowFrameSet, RangeSpec};
use tfm_core::gradcheck_suite;
use tfm_core::neural::{ParamStore, Tensor2D, DEFAULT_STEP};
use tfm_core::pipeline::{last_pose_frame, run_pipeline, PipelineConfig, PipelineError, TfmModel};
use tfm_core::scenesynth::{self, SceneSpec, SynthError};
use tfm_core::spatial_enc::{Composer, Fuser, FusionConfig, MaskSpec, Pipe, QueryParadigm};
use tfm_core::temporal_enc::{
    empty_batch, select_instances, validity_filter, SectorWeighting, TemporalEncoder,
    TemporalEncoderConfig,
};
use tfm_core::tensor_io::{self, NamedTensors};

#[derive(Parser)]
#[command(
    name = "tfm",
    version,
    about = "Traffic-flow-aware lane feature fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align trajectory logs to the current ego frame and clip to a range.
    Extract(ExtractArgs),
    /// Select, pad and encode flow instances into TF_feat.
    EncodeTemporal(EncodeArgs),
    /// Fuse lane and flow features under the spatial mask.
    Fuse(FuseArgs),
    /// Generate synthetic scenes.
    Synth(SynthArgs),
    /// Full pipeline from logs and lane features.
    Run(RunArgs),
    /// Desk-scale probe training experiment.
    Experiment(ExperimentArgs),
    /// Finite-difference gradient checks of every layer.
    Gradcheck(GradcheckArgs),
    /// Print or check configuration files.
    Config(ConfigArgs),
    /// Random lane features for trying the pipeline without a lane detector.
    Lanes(LanesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipeArg {
    #[value(name = "lt-ll")]
    LtLl,
    All,
}

impl From<PipeArg> for Pipe {
    fn from(p: PipeArg) -> Self {
        match p {
            PipeArg::LtLl => Pipe::LtLl,
            PipeArg::All => Pipe::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Instance,
    Point,
}

impl From<ParadigmArg> for QueryParadigm {
    fn from(p: ParadigmArg) -> Self {
        match p {
            ParadigmArg::Instance => QueryParadigm::InstanceBased,
            ParadigmArg::Point => QueryParadigm::PointLevel,
        }
    }
}

#[derive(clap::Args)]
struct ExtractArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Current frame; defaults to the last pose frame.
    #[arg(long)]
    frame: Option<i64>,
    #[arg(long, default_value_t = 20)]
    window: i64,
    /// x_min,x_max,y_min,y_max in meters.
    #[arg(long, default_value = "-50,50,-25,25", value_parser = parse_range)]
    range: RangeSpec,
    /// Flow set JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct EncodeArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long, default_value_t = 5)]
    tole_pts: usize,
    #[arg(long, default_value_t = 30)]
    n_t: usize,
    #[arg(long, default_value_t = 20)]
    f_t: usize,
    #[arg(long, value_enum, default_value = "on")]
    norm: OnOff,
    /// Perceptual region.
    #[arg(long, default_value = "-50,50,-25,25", value_parser = parse_range)]
    range: RangeSpec,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// TFM1 weights; missing tensors are initialized from `--seed`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TFM1 file receiving `tf_feat`.
    #[arg(long)]
    out: PathBuf,
    /// Mask JSON for `fuse --mask`.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct FuseArgs {
    /// TFM1 file holding `l_feat`.
    #[arg(long)]
    lane: PathBuf,
    /// TFM1 file holding `tf_feat`.
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum, default_value = "lt-ll")]
    pipe: PipeArg,
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, value_enum, default_value = "point")]
    paradigm: ParadigmArg,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero the output projections of freshly initialized modules.
    #[arg(long)]
    zero_init: bool,
    /// TFM1 file receiving `f1`..`f4` and `l_feat_prime`.
    #[arg(long)]
    out: PathBuf,
    /// Write every parameter used, including freshly initialized ones.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Scene spec JSON.
    #[arg(long, conflicts_with_all = ["dataset", "default_spec"])]
    spec: Option<PathBuf>,
    /// Write the experiment dataset (one subdirectory per scene).
    #[arg(long)]
    dataset: bool,
    /// Experiment config used by `--dataset`.
    #[arg(long, requires = "dataset")]
    config: Option<PathBuf>,
    /// Print the default scene spec and exit.
    #[arg(long)]
    default_spec: bool,
    #[arg(long, required_unless_present = "default_spec")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline config JSON; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// TFM1 file holding `l_feat`.
    #[arg(long)]
    lane: PathBuf,
    #[arg(long)]
    frame: Option<i64>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// TFM1 file receiving `l_feat_prime` and `tf_feat`.
    #[arg(long)]
    out: PathBuf,
    /// Deterministic diagnostics JSON.
    #[arg(long)]
    diag_out: Option<PathBuf>,
    /// Write every parameter used, including freshly initialized ones.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenes written by `synth --dataset`; generated in memory when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Skip evaluating the flow-trained model without flow.
    #[arg(long)]
    no_infer_without_flow: bool,
    /// Full report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Also report pass rates over seeds 0..N.
    #[arg(long)]
    sweep: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Print the default pipeline config.
    #[arg(long, conflicts_with = "check")]
    default: bool,
    /// Use the experiment config schema.
    #[arg(long)]
    experiment: bool,
    /// Validate a config file and print its canonical form.
    #[arg(long)]
    check: Option<PathBuf>,
    /// Accepted for uniformity; output is always JSON.
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct LanesArgs {
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TFM1 file receiving `l_feat`, uniform in [-1, 1).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Reads `x_min,x_max,y_min,y_max` without checking ordering, so that an
/// inverted range is reported as infeasible rather than malformed.
fn parse_range(s: &str) -> Result<RangeSpec, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x_min, x_max, y_min, y_max] => Ok(RangeSpec {
            x_min,
            x_max,
            y_min,
            y_max,
        }),
        _ => Err("expected four comma-separated numbers".into()),
    }
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const INPUT: u8 = 2;
const NUMERIC: u8 = 3;
const INFEASIBLE: u8 = 4;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    fail(INPUT, error)
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => INFEASIBLE,
            _ if e.is_numeric() => NUMERIC,
            _ => INPUT,
        };
        fail(code, e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Pipeline(p) => p.into(),
            ExperimentError::Diverged { .. } => fail(NUMERIC, e),
            ExperimentError::Config(_) => fail(INFEASIBLE, e),
            ExperimentError::Dataset(_) => fail(INPUT, e),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::Infeasible(_) => INFEASIBLE,
            _ => INPUT,
        };
        fail(code, e)
    }
}

type CliResult = Result<(), Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_slice(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(input)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(input)?;
    }
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, s)
}

fn read_tensors(path: &Path) -> Result<NamedTensors, Failure> {
    tensor_io::read_file(path).map_err(input)
}

fn write_tensors(path: &Path, tensors: &NamedTensors) -> CliResult {
    let bytes = tensor_io::encode(tensors).map_err(input)?;
    write(path, bytes)
}

/// `name` from a TFM1 file, or its only tensor.
fn tensor_named(tensors: &NamedTensors, name: &str, path: &Path) -> Result<Tensor2D, Failure> {
    match tensor_io::find(tensors, name) {
        Ok(t) => Ok(t.clone()),
        Err(_) if tensors.len() == 1 => Ok(tensors[0].1.clone()),
        Err(e) => Err(input(anyhow!("{}: {e}", path.display()))),
    }
}

fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

/// Error chain without repeating causes that a message already embeds.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn extract(a: ExtractArgs) -> CliResult {
    a.range.validate().map_err(|e| fail(INFEASIBLE, e))?;
    let traj = read(&a.traj)?;
    let poses = read(&a.poses)?;
    let frame = match a.frame {
        Some(f) => f,
        None => last_pose_frame(&poses)?,
    };
    let parsed = parse_log(traj.as_slice(), poses.as_slice(), frame, a.window).map_err(input)?;
    let flow = clip_to_range(&parsed.flow, &a.range);
    let text = serde_json::to_string_pretty(&flow).expect("flow serializes");
    match &a.out {
        Some(p) => write(p, format!("{text}\n"))?,
        None if !a.json => println!("{text}"),
        None => {}
    }
    if a.json {
        print_json(&json!({
            "current_frame": frame,
            "instances": flow.instances.len(),
            "observations": flow.observation_count(),
            "stats": parsed.stats,
            "flow": if a.out.is_none() { serde_json::to_value(&flow).expect("flow") } else { json!(null) },
        }));
    } else {
        eprintln!(
            "frame {frame}: {} instances, {} observations ({} unknown categories)",
            flow.instances.len(),
            flow.observation_count(),
            parsed.stats.unknown_categories
        );
    }
    Ok(())
}

fn encode_temporal(a: EncodeArgs) -> CliResult {
    if a.tole_pts == 0 || a.tole_pts > a.f_t {
        return Err(fail(INFEASIBLE, anyhow!("tole_pts must lie in [1, f_t]")));
    }
    a.range.validate().map_err(|e| fail(INFEASIBLE, e))?;
    let fusion = FusionConfig {
        dim: a.dim,
        heads: a.heads,
        ..FusionConfig::default()
    };
    fusion.validate().map_err(|e| fail(INFEASIBLE, e))?;
    let flow: FlowFrameSet = read_json(&a.flow)?;
    if flow.window < a.f_t {
        return Err(fail(
            INFEASIBLE,
            anyhow!("flow window {} is shorter than f_t {}", flow.window, a.f_t),
        ));
    }
    let flow = clip_to_range(&flow, &a.range);
    let cands = validity_filter(&flow, a.tole_pts, a.f_t).map_err(input)?;
    let (batch, mask) = if cands.is_empty() || a.n_t == 0 {
        empty_batch(a.n_t, a.f_t)
    } else {
        let sector = SectorWeighting::for_range(&a.range);
        let weights: Vec<f64> = cands.iter().map(|c| sector.instance_weight(c)).collect();
        select_instances(&cands, &weights, a.n_t).map_err(input)?
    };
    let encoder = TemporalEncoder::new(TemporalEncoderConfig {
        dim: a.dim,
        heads: a.heads,
        ffn_dim: fusion.ffn_dim(),
        frames: a.f_t,
        normalize_coords: matches!(a.norm, OnOff::On),
        range: a.range,
    });
    let mut store = match &a.weights {
        Some(p) => tensor_io::store_from_tensors(a.seed, read_tensors(p)?),
        None => ParamStore::new(a.seed),
    };
    encoder.register(&mut store).map_err(input)?;
    let out = encoder
        .encode(&store, &batch, &mask)
        .map_err(PipelineError::from)?;
    write_tensors(&a.out, &vec![("tf_feat".to_string(), out.tf_feat.clone())])?;
    let spec = MaskSpec {
        flow_validity: out.validity.clone(),
        lane_mask: None,
    };
    if let Some(p) = &a.mask_out {
        write_json(p, &spec)?;
    }
    let real = batch.real_count();
    if a.json {
        print_json(&json!({
            "candidates": cands.len(),
            "selected": real,
            "capacity": a.n_t,
            "validity": out.validity,
            "track_ids": batch.slots.iter().map(|s| s.track_id.clone()).collect::<Vec<_>>(),
            "temporal_mask": mask.bits.to_rows(),
            "temporal_fill": mask.bits.fill_ratio(),
        }));
    } else {
        eprintln!("{} candidates, {real} selected of {}", cands.len(), a.n_t);
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> CliResult {
    let lane_file = read_tensors(&a.lane)?;
    let flow_file = read_tensors(&a.flow)?;
    let l_feat = tensor_named(&lane_file, "l_feat", &a.lane)?;
    let tf_feat = tensor_named(&flow_file, "tf_feat", &a.flow)?;
    let spec: MaskSpec = read_json(&a.mask)?;
    if spec.flow_validity.len() != tf_feat.rows() {
        return Err(input(anyhow!(
            "mask has {} flow entries, flow features have {} rows",
            spec.flow_validity.len(),
            tf_feat.rows()
        )));
    }
    let mask = spec.build(l_feat.rows()).map_err(input)?;
    let cfg = FusionConfig {
        pipe: a.pipe.into(),
        depth: a.depth,
        heads: a.heads,
        dim: l_feat.cols(),
        ..FusionConfig::default()
    };
    let fuser = Fuser::new(cfg).map_err(|e| fail(INFEASIBLE, e))?;
    let composer = Composer::new(cfg.dim);
    let mut store = match &a.weights {
        Some(p) => tensor_io::store_from_tensors(a.seed, read_tensors(p)?),
        None => ParamStore::new(a.seed),
    };
    fuser.register(&mut store, a.zero_init).map_err(input)?;
    composer.register(&mut store).map_err(input)?;
    let stages = fuser
        .fuse(&store, &l_feat, &tf_feat, &mask)
        .map_err(PipelineError::from)?;
    let paradigm: QueryParadigm = a.paradigm.into();
    let l_prime = composer
        .compose(&store, stages.final_lane_update(), &l_feat, paradigm)
        .map_err(PipelineError::from)?;
    let mut tensors: NamedTensors = stages
        .stages
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("f{}", i + 1), t.clone()))
        .collect();
    tensors.push(("l_feat_prime".to_string(), l_prime.clone()));
    write_tensors(&a.out, &tensors)?;
    if let Some(p) = &a.save_weights {
        write_tensors(p, &tensor_io::store_tensors(&store))?;
    }
    if a.json {
        print_json(&json!({
            "lanes": l_feat.rows(),
            "flow": tf_feat.rows(),
            "dim": cfg.dim,
            "pipe": cfg.pipe.to_string(),
            "paradigm": paradigm,
            "mask_fill": tfm_core::pipeline::MaskFill::of(&mask),
            "max_abs_update": l_prime.max_abs_diff(&l_feat),
        }));
    } else {
        eprintln!(
            "fused {} lane rows with {} flow rows",
            l_feat.rows(),
            tf_feat.rows()
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    if a.default_spec {
        print_json(&serde_json::to_value(SceneSpec::default()).expect("spec"));
        return Ok(());
    }
    let out_dir = a.out_dir.expect("required by clap");
    if a.dataset {
        let cfg: ExperimentConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        let specs = experiment::dataset_specs(&cfg);
        let mut names = Vec::new();
        for (k, spec) in specs.iter().enumerate() {
            let scene = scenesynth::generate(spec)?;
            let name = format!("scene_{k:03}");
            scene.write_to(&out_dir.join(&name))?;
            names.push(name);
        }
        if a.json {
            print_json(&json!({ "out_dir": out_dir, "scenes": names }));
        } else {
            eprintln!("wrote {} scenes to {}", names.len(), out_dir.display());
        }
        return Ok(());
    }
    let spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    let scene = scenesynth::generate(&spec)?;
    scene.write_to(&out_dir)?;
    if a.json {
        print_json(&json!({
            "out_dir": out_dir,
            "current_frame": scene.current_frame(),
            "records": scene.trajectories.len(),
            "poses": scene.poses.len(),
            "navigable_cells": scene.truth.navigable.count(),
        }));
    } else {
        eprintln!("{}", scenesynth::describe(&scene));
    }
    Ok(())
}

fn run(a: RunArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_json(&String::from_utf8_lossy(&read(p)?))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let model = TfmModel::new(&cfg)?;
    let store = match &a.weights {
        Some(p) => model.load_store(cfg.seed, read_tensors(p)?, cfg.zero_init_output)?,
        None => model.init_store(cfg.seed, cfg.zero_init_output),
    };
    let lane_file = read_tensors(&a.lane)?;
    let l_feat = tensor_named(&lane_file, "l_feat", &a.lane)?;
    let traj = read(&a.traj)?;
    let poses = read(&a.poses)?;
    let out = run_pipeline(&cfg, &store, &traj, &poses, a.frame, &l_feat, None)?;
    write_tensors(
        &a.out,
        &vec![
            ("l_feat_prime".to_string(), out.l_feat_prime.clone()),
            ("tf_feat".to_string(), out.tf_feat.clone()),
        ],
    )?;
    if let Some(p) = &a.diag_out {
        write_json(p, &out.diagnostics)?;
    }
    if let Some(p) = &a.save_weights {
        write_tensors(p, &tensor_io::store_tensors(&store))?;
    }
    if a.json {
        print_json(&json!({
            "diagnostics": out.diagnostics,
            "timings_ms": out.timings.stages,
        }));
    } else {
        let d = &out.diagnostics;
        println!(
            "frame {}: {} valid instances of {} (candidates {}), spatial fill {:.3}",
            d.current_frame, d.valid_instances, d.capacity, d.flow.candidates, d.spatial_fill.total
        );
        for (stage, ms) in &out.timings.stages {
            println!("  {stage}: {ms:.3} ms");
        }
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> CliResult {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if a.no_infer_without_flow {
        cfg.infer_without_flow = false;
    }
    cfg.validate()?;
    let scenes = match &a.dataset {
        Some(dir) => experiment::load_dataset(dir, cfg.pipeline.window)?,
        None => experiment::generate_dataset(&cfg)?,
    };
    let report = experiment::run_experiment(&cfg, &scenes)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    let flow_helps = report.flow_helps();
    let training_helps = report.flow_training_helps();
    if a.json {
        print_json(&json!({
            "median": report.median,
            "per_seed": report.seeds.iter().map(|s| json!({
                "seed": s.seed,
                "with_flow": s.with_flow.final_loss,
                "without_flow": s.without_flow.final_loss,
                "train_with_infer_without": s.train_with_infer_without,
                "baseline": s.baseline.final_loss,
            })).collect::<Vec<_>>(),
            "mask": report.mask,
            "with_flow_le_without_flow": flow_helps,
            "train_with_infer_without_le_baseline": training_helps,
            "elapsed_seconds": report.elapsed_seconds,
        }));
    } else {
        let m = &report.median;
        println!("median held-out loss over {} seeds", report.seeds.len());
        println!("  with flow                 {:.6}", m.with_flow);
        println!("  without flow              {:.6}", m.without_flow);
        if let Some(v) = m.train_with_infer_without {
            println!("  train with, infer without {v:.6}");
        }
        println!("  lane-only probe           {:.6}", m.baseline);
        println!("with flow <= without flow: {flow_helps}");
        if let Some(b) = training_helps {
            println!("train with/infer without <= lane-only probe: {b}");
        }
        println!("{:.1} s", report.elapsed_seconds);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let outcomes = gradcheck_suite::run_all(a.seed, a.step);
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.report.max_rel_error.is_nan() || o.report.max_rel_error >= a.tol)
        .map(|o| o.name.as_str())
        .collect();
    let sweep = a.sweep.map(|n| {
        let mut passes: Vec<(String, u64)> = Vec::new();
        for seed in 0..n {
            for (k, o) in gradcheck_suite::run_all(seed, a.step).iter().enumerate() {
                if passes.len() <= k {
                    passes.push((o.name.clone(), 0));
                }
                passes[k].1 += u64::from(o.report.max_rel_error < a.tol);
            }
        }
        passes
    });
    if a.json {
        print_json(&json!({
            "seed": a.seed,
            "step": a.step,
            "tolerance": a.tol,
            "checks": outcomes.iter().map(|o| json!({
                "name": o.name,
                "max_rel_error": o.report.max_rel_error,
                "worst_index": o.report.worst_index,
                "analytic": o.report.analytic,
                "numeric": o.report.numeric,
                "checked": o.report.checked,
                "pass": o.report.max_rel_error < a.tol,
            })).collect::<Vec<_>>(),
            "failed": failed,
            "sweep": sweep.as_ref().map(|s| s.iter().map(|(n, p)| json!({"name": n, "passed": p})).collect::<Vec<_>>()),
        }));
    } else {
        for o in &outcomes {
            let verdict = if o.report.max_rel_error < a.tol {
                "PASS"
            } else {
                "FAIL"
            };
            println!(
                "{verdict} {:<40} {:.3e} ({} coords)",
                o.name, o.report.max_rel_error, o.report.checked
            );
        }
        if let (Some(s), Some(n)) = (&sweep, a.sweep) {
            println!("pass rate over seeds 0..{n}:");
            for (name, p) in s {
                println!("  {name:<40} {p}/{n}");
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(
            NUMERIC,
            anyhow!("{} checks above tolerance {}", failed.len(), a.tol),
        ))
    }
}

fn config(a: ConfigArgs) -> CliResult {
    let text = match (&a.check, a.experiment) {
        (Some(p), false) => {
            PipelineConfig::from_json(&String::from_utf8_lossy(&read(p)?))?.to_json()
        }
        (Some(p), true) => {
            let cfg: ExperimentConfig = read_json(p)?;
            cfg.validate()?;
            serde_json::to_string_pretty(&cfg).expect("config")
        }
        (None, false) => PipelineConfig::default().to_json(),
        (None, true) => serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config"),
    };
    let _ = a.default;
    let _ = a.json;
    println!("{text}");
    Ok(())
}

fn lanes(a: LanesArgs) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = (0..a.rows * a.dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let t = Tensor2D::from_vec(a.rows, a.dim, data).map_err(input)?;
    write_tensors(&a.out, &vec![("l_feat".to_string(), t)])?;
    if a.json {
        print_json(&json!({ "rows": a.rows, "dim": a.dim, "out": a.out }));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::EncodeTemporal(a) => encode_temporal(a),
        Command::Fuse(a) => fuse(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Config(a) => config(a),
        Command::Lanes(a) => lanes(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}
