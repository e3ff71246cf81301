//! Desk-scale training experiment.
//!
//! Lane tokens are BEV patches carrying position features and a noisy view
//! of lane occupancy. Random rectangles hide part of the view; hidden patches
//! keep only their position. A linear probe on the (possibly flow-enhanced)
//! lane features predicts the navigable fraction of each hidden patch, scored
//! by binary cross-entropy.
//!
//! Arms per seed:
//! - `with_flow`: trained and evaluated with flow instances;
//! - `without_flow`: trained and evaluated with `n_t = 0`;
//! - `train_with_infer_without`: the `with_flow` weights evaluated at `n_t = 0`;
//! - `baseline`: the probe alone on raw lane features.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow_extract::{parse_log, FlowFrameSet, RangeSpec};
use crate::neural::{Init, Linear, ParamStore, Tensor2D};
use crate::pipeline::{prepare_flow, PipelineConfig, PipelineError, PreparedFlow, TfmModel};
use crate::scenesynth::{
    generate, GroundTruth, OccupancyGrid, Scene, SceneSpec, POSE_FILE, SPEC_FILE, TRAJECTORY_FILE,
    TRUTH_FILE,
};
use crate::spatial_enc::{FusionConfig, Pipe, QueryParadigm};

const VIEW_STREAM: u64 = 7;
const ORDER_STREAM: u64 = 9;
/// Position, visibility, evidence and bias channels.
pub const FEATURE_CHANNELS: usize = 11;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss in arm {arm} for seed {seed} at epoch {epoch}")]
    Diverged {
        seed: u64,
        arm: String,
        epoch: usize,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    /// BEV patch edge, meters.
    pub patch: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Uniform noise amplitude on visible occupancy evidence.
    pub evidence_noise: f64,
    /// Hidden rectangles per scene, inclusive range.
    pub view_blocks: [usize; 2],
    /// Flow observation occlusion and drop rates for generated datasets.
    pub occlusion_rate: f64,
    pub frame_drop_rate: f64,
    pub dataset_seed: u64,
    pub seeds: Vec<u64>,
    pub infer_without_flow: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig {
                fusion: FusionConfig {
                    pipe: Pipe::LtLl,
                    depth: 1,
                    normalize_coords: true,
                    heads: 2,
                    dim: 16,
                },
                paradigm: QueryParadigm::PointLevel,
                ..PipelineConfig::default()
            },
            patch: 5.0,
            train_scenes: 48,
            test_scenes: 16,
            epochs: 15,
            lr: 0.03,
            clip_norm: 1.0,
            evidence_noise: 0.1,
            view_blocks: [3, 5],
            occlusion_rate: 0.3,
            frame_drop_rate: 0.1,
            dataset_seed: 1000,
            seeds: vec![0, 1, 2, 3, 4],
            infer_without_flow: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.pipeline.validate()?;
        if self.pipeline.fusion.dim < FEATURE_CHANNELS {
            return bad("fusion dim must hold the patch feature channels (at least 11)");
        }
        if !(self.patch.is_finite() && self.patch > 0.0) {
            return bad("patch must be positive");
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return bad("train_scenes and test_scenes must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || self.clip_norm.is_nan()
            || self.clip_norm <= 0.0
        {
            return bad("lr must be non-negative and clip_norm positive");
        }
        if self.view_blocks[0] > self.view_blocks[1] {
            return bad("view_blocks must be an increasing pair");
        }
        if self.seeds.len() < 3 {
            return bad("at least three seeds are required");
        }
        Ok(())
    }
}

/// One scene turned into lane tokens and probe targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub tokens: Tensor2D,
    pub hidden: Vec<bool>,
    /// Navigable fraction per patch.
    pub target: Vec<f64>,
    pub flow: PreparedFlow,
    pub no_flow: PreparedFlow,
}

impl Sample {
    pub fn hidden_count(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }
}

/// Logs and ground truth of one scene as stored on disk.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub seed: u64,
    pub flow: FlowFrameSet,
    pub navigable: OccupancyGrid,
}

impl SceneData {
    pub fn from_scene(name: &str, scene: &Scene, window: usize) -> Result<Self, ExperimentError> {
        let parsed = parse_log(
            scene.trajectory_jsonl().as_bytes(),
            scene.pose_jsonl().as_bytes(),
            scene.current_frame(),
            window as i64,
        )
        .map_err(PipelineError::from)?;
        Ok(Self {
            name: name.to_string(),
            seed: scene.spec.seed,
            flow: parsed.flow,
            navigable: scene.truth.navigable.clone(),
        })
    }

    /// Reads a directory written by `Scene::write_to`.
    pub fn load(dir: &Path, window: usize) -> Result<Self, ExperimentError> {
        let read = |f: &str| {
            fs::read(dir.join(f))
                .map_err(|e| ExperimentError::Dataset(format!("{}: {e}", dir.join(f).display())))
        };
        let spec: SceneSpec = serde_json::from_slice(&read(SPEC_FILE)?)
            .map_err(|e| ExperimentError::Dataset(format!("{}: {e}", dir.display())))?;
        let truth: GroundTruth = serde_json::from_slice(&read(TRUTH_FILE)?)
            .map_err(|e| ExperimentError::Dataset(format!("{}: {e}", dir.display())))?;
        let parsed = parse_log(
            read(TRAJECTORY_FILE)?.as_slice(),
            read(POSE_FILE)?.as_slice(),
            truth.current_frame,
            window as i64,
        )
        .map_err(PipelineError::from)?;
        Ok(Self {
            name: dir
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            seed: spec.seed,
            flow: parsed.flow,
            navigable: truth.navigable,
        })
    }
}

/// Scene specs of a generated dataset.
pub fn dataset_specs(cfg: &ExperimentConfig) -> Vec<SceneSpec> {
    (0..(cfg.train_scenes + cfg.test_scenes) as u64)
        .map(|k| {
            SceneSpec::sample_road(
                cfg.dataset_seed + k,
                cfg.occlusion_rate,
                cfg.frame_drop_rate,
            )
        })
        .collect()
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<SceneData>, ExperimentError> {
    dataset_specs(cfg)
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let scene = generate(spec).map_err(|e| ExperimentError::Dataset(e.to_string()))?;
            SceneData::from_scene(&format!("scene_{k:03}"), &scene, cfg.pipeline.window)
        })
        .collect()
}

/// Loads every scene subdirectory of `dir` in name order.
pub fn load_dataset(dir: &Path, window: usize) -> Result<Vec<SceneData>, ExperimentError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| ExperimentError::Dataset(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(SPEC_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| SceneData::load(d, window)).collect()
}

/// Patch grid over `range`, row-major in x then y.
fn patch_grid(range: &RangeSpec, patch: f64) -> (usize, usize) {
    (
        (range.width() / patch).ceil() as usize,
        (range.height() / patch).ceil() as usize,
    )
}

fn patch_features(range: &RangeSpec, patch: f64, ix: usize, iy: usize, dim: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let cx = range.x_min + (ix as f64 + 0.5) * patch;
    let cy = range.y_min + (iy as f64 + 0.5) * patch;
    let (nx, ny) = range.normalize(crate::geometry::PointBEV::new(cx, cy));
    let mut f = vec![0.0; dim];
    f[..8].copy_from_slice(&[
        nx,
        ny,
        (PI * nx).sin(),
        (PI * nx).cos(),
        (PI * ny).sin(),
        (PI * ny).cos(),
        nx * ny,
        ny * ny,
    ]);
    f[10] = 1.0;
    f
}

/// Builds tokens, hidden flags and targets for one scene.
pub fn build_sample(cfg: &ExperimentConfig, scene: &SceneData) -> Result<Sample, ExperimentError> {
    let range = cfg.pipeline.r_p;
    let (px, py) = patch_grid(&range, cfg.patch);
    let dim = cfg.pipeline.fusion.dim;
    let nav = &scene.navigable;

    let mut hits = vec![0usize; px * py];
    let mut cells = vec![0usize; px * py];
    for ix in 0..nav.nx {
        for iy in 0..nav.ny {
            let c = nav.center(ix, iy);
            if !range.contains(c) {
                continue;
            }
            let qx = (((c.x - range.x_min) / cfg.patch) as usize).min(px - 1);
            let qy = (((c.y - range.y_min) / cfg.patch) as usize).min(py - 1);
            cells[qx * py + qy] += 1;
            hits[qx * py + qy] += usize::from(nav.get(ix, iy));
        }
    }
    let target: Vec<f64> = hits
        .iter()
        .zip(&cells)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ cfg.dataset_seed.rotate_left(17));
    rng.set_stream(VIEW_STREAM);
    let mut hidden = vec![false; px * py];
    let blocks = rng.random_range(cfg.view_blocks[0]..=cfg.view_blocks[1]);
    for _ in 0..blocks {
        let w = rng.random_range(2..=px.div_ceil(3).max(2));
        let h = rng.random_range(2..=py.div_ceil(2).max(2));
        let x0 = rng.random_range(0..px.saturating_sub(w).max(1));
        let y0 = rng.random_range(0..py.saturating_sub(h).max(1));
        for qx in x0..(x0 + w).min(px) {
            for qy in y0..(y0 + h).min(py) {
                hidden[qx * py + qy] = true;
            }
        }
    }

    let mut tokens = Tensor2D::zeros(px * py, dim);
    for qx in 0..px {
        for qy in 0..py {
            let k = qx * py + qy;
            let mut f = patch_features(&range, cfg.patch, qx, qy, dim);
            // Noise is drawn for every patch so visibility does not shift
            // the stream.
            let noise = rng.random_range(-1.0..=1.0) * cfg.evidence_noise;
            if !hidden[k] {
                f[8] = 1.0;
                f[9] = (target[k] + noise).clamp(0.0, 1.0);
            }
            tokens.row_mut(k).copy_from_slice(&f);
        }
    }

    let flow = prepare_flow(&cfg.pipeline, &scene.flow)?;
    let no_flow = prepare_flow(
        &PipelineConfig {
            n_t: 0,
            ..cfg.pipeline.clone()
        },
        &scene.flow,
    )?;
    Ok(Sample {
        name: scene.name.clone(),
        tokens,
        hidden,
        target,
        flow,
        no_flow,
    })
}

pub fn build_samples(
    cfg: &ExperimentConfig,
    scenes: &[SceneData],
) -> Result<Vec<Sample>, ExperimentError> {
    scenes.iter().map(|s| build_sample(cfg, s)).collect()
}

/// Soft-label binary cross-entropy with logits, averaged over hidden
/// patches. Returns the loss and `d loss / d logit` per patch.
pub fn hidden_bce(logits: &Tensor2D, target: &[f64], hidden: &[bool]) -> (f64, Tensor2D) {
    let n = hidden.iter().filter(|&&h| h).count();
    let mut grad = Tensor2D::zeros(logits.rows(), 1);
    if n == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for k in (0..logits.rows()).filter(|&k| hidden[k]) {
        let z = logits[(k, 0)];
        let y = target[k];
        // softplus(z) - y z, written to stay finite for large |z|
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        grad[(k, 0)] = (1.0 / (1.0 + (-z).exp()) - y) * inv;
    }
    (loss * inv, grad)
}

/// What feeds the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    /// Lane features enhanced by the model, with or without flow.
    Tfm { flow: bool },
    /// Raw lane features.
    Probe,
}

/// Model and probe sharing one store.
pub struct Learner {
    pub model: TfmModel,
    pub probe: Linear,
    pub store: ParamStore,
}

impl Learner {
    pub const PROBE: &'static str = "probe";

    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, ExperimentError> {
        let model = TfmModel::new(&cfg.pipeline)?;
        let mut store = model.init_store(seed, cfg.pipeline.zero_init_output);
        let probe = Linear::new(Self::PROBE, cfg.pipeline.fusion.dim, 1);
        probe
            .register(&mut store, Init::XavierUniform)
            .map_err(PipelineError::from)?;
        Ok(Self {
            model,
            probe,
            store,
        })
    }

    fn features(
        &self,
        arm: ArmKind,
        s: &Sample,
    ) -> Result<(Tensor2D, Option<crate::pipeline::ModelCache>), ExperimentError> {
        match arm {
            ArmKind::Probe => Ok((s.tokens.clone(), None)),
            ArmKind::Tfm { flow } => {
                let prepared = if flow { &s.flow } else { &s.no_flow };
                let (out, cache) = self.model.forward(&self.store, prepared, &s.tokens, None)?;
                Ok((out.l_feat_prime, Some(cache)))
            }
        }
    }

    pub fn loss(&self, arm: ArmKind, s: &Sample) -> Result<f64, ExperimentError> {
        let (feat, _) = self.features(arm, s)?;
        let logits = self
            .probe
            .forward(&self.store, &feat)
            .map_err(PipelineError::from)?;
        Ok(hidden_bce(&logits, &s.target, &s.hidden).0)
    }

    pub fn mean_loss(&self, arm: ArmKind, samples: &[Sample]) -> Result<f64, ExperimentError> {
        let mut total = 0.0;
        for s in samples {
            total += self.loss(arm, s)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// One SGD step on one sample. Returns the loss before the step.
    pub fn step(
        &mut self,
        arm: ArmKind,
        s: &Sample,
        lr: f64,
        clip: f64,
    ) -> Result<f64, ExperimentError> {
        let (feat, cache) = self.features(arm, s)?;
        let logits = self
            .probe
            .forward(&self.store, &feat)
            .map_err(PipelineError::from)?;
        let (loss, d_logits) = hidden_bce(&logits, &s.target, &s.hidden);
        self.store.zero_grad();
        let d_feat = self
            .probe
            .backward(&mut self.store, &feat, &d_logits)
            .map_err(PipelineError::from)?;
        if let Some(cache) = cache {
            self.model.backward(&mut self.store, &cache, &d_feat)?;
        }
        self.store.sgd_step(lr, Some(clip));
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// Mean held-out loss after training.
    pub final_loss: f64,
    /// Raw mean training loss per epoch.
    pub curve: Vec<f64>,
    /// Running minimum of `curve`.
    pub curve_smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub with_flow: ArmResult,
    pub without_flow: ArmResult,
    pub baseline: ArmResult,
    pub train_with_infer_without: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub with_flow: f64,
    pub without_flow: f64,
    pub baseline: f64,
    pub train_with_infer_without: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub scenes: usize,
    pub mean_selected: f64,
    pub mean_temporal_fill: f64,
    pub hidden_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub median: Medians,
    pub mask: MaskStats,
    pub elapsed_seconds: f64,
}

impl ExperimentReport {
    pub fn flow_helps(&self) -> bool {
        self.median.with_flow <= self.median.without_flow
    }

    /// `None` when inference without flow was not evaluated.
    pub fn flow_training_helps(&self) -> Option<bool> {
        self.median
            .train_with_infer_without
            .map(|v| v <= self.median.baseline)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn train_arm(
    cfg: &ExperimentConfig,
    seed: u64,
    arm: ArmKind,
    name: &str,
    train: &[Sample],
) -> Result<(Learner, Vec<f64>), ExperimentError> {
    let mut learner = Learner::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORDER_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let diverged = || ExperimentError::Diverged {
                seed,
                arm: name.to_string(),
                epoch,
            };
            let loss = match learner.step(arm, &train[i], cfg.lr, cfg.clip_norm) {
                Err(ExperimentError::Pipeline(e)) if e.is_numeric() => return Err(diverged()),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            total += loss;
        }
        curve.push(total / train.len() as f64);
    }
    Ok((learner, curve))
}

fn arm_result(
    learner: &Learner,
    arm: ArmKind,
    curve: Vec<f64>,
    test: &[Sample],
    seed: u64,
    name: &str,
) -> Result<ArmResult, ExperimentError> {
    let final_loss = learner.mean_loss(arm, test)?;
    if !final_loss.is_finite() {
        return Err(ExperimentError::Diverged {
            seed,
            arm: name.to_string(),
            epoch: curve.len(),
        });
    }
    let curve_smoothed = curve
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect();
    Ok(ArmResult {
        final_loss,
        curve,
        curve_smoothed,
    })
}

pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
) -> Result<SeedResult, ExperimentError> {
    let with = ArmKind::Tfm { flow: true };
    let without = ArmKind::Tfm { flow: false };
    let (wl, wc) = train_arm(cfg, seed, with, "with_flow", train)?;
    let with_flow = arm_result(&wl, with, wc, test, seed, "with_flow")?;
    let train_with_infer_without = if cfg.infer_without_flow {
        let v = wl.mean_loss(without, test)?;
        if !v.is_finite() {
            return Err(ExperimentError::Diverged {
                seed,
                arm: "train_with_infer_without".into(),
                epoch: cfg.epochs,
            });
        }
        Some(v)
    } else {
        None
    };
    let (nl, nc) = train_arm(cfg, seed, without, "without_flow", train)?;
    let without_flow = arm_result(&nl, without, nc, test, seed, "without_flow")?;
    let (bl, bc) = train_arm(cfg, seed, ArmKind::Probe, "baseline", train)?;
    let baseline = arm_result(&bl, ArmKind::Probe, bc, test, seed, "baseline")?;
    Ok(SeedResult {
        seed,
        with_flow,
        without_flow,
        baseline,
        train_with_infer_without,
    })
}

/// Trains every arm for every seed on the first `train_scenes` scenes and
/// scores the next `test_scenes`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    scenes: &[SceneData],
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let need = cfg.train_scenes + cfg.test_scenes;
    if scenes.len() < need {
        return Err(ExperimentError::Dataset(format!(
            "{} scenes available, {need} needed",
            scenes.len()
        )));
    }
    let start = Instant::now();
    let samples = build_samples(cfg, &scenes[..need])?;
    let (train, test) = samples.split_at(cfg.train_scenes);
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s, train, test))
        .collect::<Result<Vec<_>, _>>()?;
    let col = |f: &dyn Fn(&SeedResult) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let median = Medians {
        with_flow: col(&|r| r.with_flow.final_loss),
        without_flow: col(&|r| r.without_flow.final_loss),
        baseline: col(&|r| r.baseline.final_loss),
        train_with_infer_without: cfg
            .infer_without_flow
            .then(|| col(&|r| r.train_with_infer_without.unwrap_or(f64::NAN))),
    };
    let n = samples.len() as f64;
    let mask = MaskStats {
        scenes: samples.len(),
        mean_selected: samples
            .iter()
            .map(|s| s.flow.counts.selected as f64)
            .sum::<f64>()
            / n,
        mean_temporal_fill: samples
            .iter()
            .map(|s| s.flow.mask.bits.fill_ratio())
            .sum::<f64>()
            / n,
        hidden_fraction: samples
            .iter()
            .map(|s| s.hidden_count() as f64 / s.hidden.len() as f64)
            .sum::<f64>()
            / n,
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds,
        median,
        mask,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
