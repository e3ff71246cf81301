//! End-to-end wiring: logs and lane features in, enhanced lane features out.
//!
//! Stages: extract, clip to `r_p`, clip to `r_t`, validity filter, weighted
//! selection, temporal encoding, spatial mask, fusion, composition.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::flow_extract::{
    clip_to_range, parse_log, FlowError, FlowFrameSet, ParseStats, RangeSpec,
};
use crate::neural::{BoolGrid, NeuralError, ParamStore, Tensor2D};
use crate::spatial_enc::{
    build_spatial_mask, Composer, FuseCache, FusedStages, Fuser, FusionConfig, QueryParadigm,
    SpatialError, SpatialMask,
};
use crate::temporal_enc::{
    empty_batch, select_instances, validity_filter, RefinedFlowBatch, SectorWeighting,
    TemporalCache, TemporalEncoder, TemporalEncoderConfig, TemporalError, TemporalMask,
};
use crate::tensor_io::{NamedTensors, TensorIoError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("infeasible config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

impl PipelineError {
    /// True for failures of the numeric path rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PipelineError::Spatial(SpatialError::NonFinite(_))
                | PipelineError::Spatial(SpatialError::Neural(NeuralError::NonFinite(_)))
                | PipelineError::Temporal(TemporalError::Neural(NeuralError::NonFinite(_)))
                | PipelineError::Neural(NeuralError::NonFinite(_))
        )
    }
}

fn default_window() -> usize {
    20
}
fn default_f_t() -> usize {
    20
}
fn default_tole_pts() -> usize {
    5
}
fn default_n_t() -> usize {
    30
}
fn default_paradigm() -> QueryParadigm {
    QueryParadigm::PointLevel
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Historical frames read from the logs.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Frames per instance seen by the temporal encoder.
    #[serde(default = "default_f_t")]
    pub f_t: usize,
    #[serde(default = "default_tole_pts")]
    pub tole_pts: usize,
    /// Instance cap. 0 disables the flow branch.
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    /// Point-cloud range applied after warping.
    #[serde(default)]
    pub r_p: RangeSpec,
    /// Perceptual region; also the coordinate normalization box.
    #[serde(default)]
    pub r_t: RangeSpec,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "default_paradigm")]
    pub paradigm: QueryParadigm,
    #[serde(default)]
    pub seed: u64,
    /// Zero the fusion output projections at initialization. Weights loaded
    /// from a file override this.
    #[serde(default = "default_true")]
    pub zero_init_output: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            f_t: default_f_t(),
            tole_pts: default_tole_pts(),
            n_t: default_n_t(),
            r_p: RangeSpec::default(),
            r_t: RangeSpec::default(),
            fusion: FusionConfig::default(),
            paradigm: default_paradigm(),
            seed: 0,
            zero_init_output: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.tole_pts == 0 || self.tole_pts > self.f_t {
            return bad(format!(
                "tole_pts = {} must lie in [1, f_t = {}]",
                self.tole_pts, self.f_t
            ));
        }
        if self.f_t > self.window {
            return bad(format!(
                "f_t = {} exceeds window = {}",
                self.f_t, self.window
            ));
        }
        self.r_p
            .validate()
            .map_err(|e| PipelineError::Config(format!("r_p: {e}")))?;
        self.r_t
            .validate()
            .map_err(|e| PipelineError::Config(format!("r_t: {e}")))?;
        self.fusion
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| PipelineError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form: every field spelled out, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn temporal_config(&self) -> TemporalEncoderConfig {
        TemporalEncoderConfig {
            dim: self.fusion.dim,
            heads: self.fusion.heads,
            ffn_dim: self.fusion.ffn_dim(),
            frames: self.f_t,
            normalize_coords: self.fusion.normalize_coords,
            range: self.r_t,
        }
    }
}

/// Instance counts after each flow stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub extracted: usize,
    pub in_point_range: usize,
    pub in_region: usize,
    pub candidates: usize,
    pub selected: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedFlow {
    pub batch: RefinedFlowBatch,
    pub mask: TemporalMask,
    pub counts: FlowCounts,
}

/// Clip, filter, weight and select. With `n_t = 0` the batch is empty.
pub fn prepare_flow(
    cfg: &PipelineConfig,
    flow: &FlowFrameSet,
) -> Result<PreparedFlow, PipelineError> {
    let in_p = clip_to_range(flow, &cfg.r_p);
    let in_t = clip_to_range(&in_p, &cfg.r_t);
    let cands = validity_filter(&in_t, cfg.tole_pts, cfg.f_t)?;
    let mut counts = FlowCounts {
        extracted: flow.instances.len(),
        in_point_range: in_p.instances.len(),
        in_region: in_t.instances.len(),
        candidates: cands.len(),
        selected: 0,
    };
    let (batch, mask) = if cands.is_empty() {
        // Frame count cannot be read off an empty candidate list.
        empty_batch(cfg.n_t, cfg.f_t)
    } else if cfg.n_t == 0 {
        empty_batch(0, cfg.f_t)
    } else {
        let sector = SectorWeighting::for_range(&cfg.r_t);
        let weights: Vec<f64> = cands.iter().map(|c| sector.instance_weight(c)).collect();
        select_instances(&cands, &weights, cfg.n_t)?
    };
    counts.selected = batch.real_count();
    Ok(PreparedFlow {
        batch,
        mask,
        counts,
    })
}

/// Temporal encoder, fusion stack and composer sharing one parameter store.
#[derive(Debug, Clone)]
pub struct TfmModel {
    temporal: TemporalEncoder,
    fuser: Fuser,
    composer: Composer,
    paradigm: QueryParadigm,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub l_feat_prime: Tensor2D,
    pub tf_feat: Tensor2D,
    pub stages: FusedStages,
    pub spatial_mask: SpatialMask,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    temporal: TemporalCache,
    fuse: FuseCache,
    f4: Tensor2D,
}

impl TfmModel {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            temporal: TemporalEncoder::new(cfg.temporal_config()),
            fuser: Fuser::new(cfg.fusion)?,
            composer: Composer::new(cfg.fusion.dim),
            paradigm: cfg.paradigm,
        })
    }

    pub fn dim(&self) -> usize {
        self.fuser.config().dim
    }

    pub fn register(&self, store: &mut ParamStore, zero_output: bool) -> Result<(), NeuralError> {
        self.temporal.register(store)?;
        self.fuser.register(store, zero_output)?;
        self.composer.register(store)
    }

    pub fn init_store(&self, seed: u64, zero_output: bool) -> ParamStore {
        let mut store = ParamStore::new(seed);
        self.register(&mut store, zero_output).expect("fresh store");
        store
    }

    /// Store holding `tensors`, with anything missing initialized. Names the
    /// model does not use are rejected.
    pub fn load_store(
        &self,
        seed: u64,
        tensors: NamedTensors,
        zero_output: bool,
    ) -> Result<ParamStore, PipelineError> {
        let known: BTreeSet<String> = self
            .init_store(seed, zero_output)
            .names()
            .map(String::from)
            .collect();
        if let Some((name, _)) = tensors.iter().find(|(n, _)| !known.contains(n)) {
            return Err(PipelineError::Input(format!(
                "weights contain unknown tensor `{name}`"
            )));
        }
        let mut store = crate::tensor_io::store_from_tensors(seed, tensors);
        self.register(&mut store, zero_output)?;
        Ok(store)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        flow: &PreparedFlow,
        l_feat: &Tensor2D,
        lane_mask: Option<&BoolGrid>,
    ) -> Result<(ModelOutput, ModelCache), PipelineError> {
        if l_feat.cols() != self.dim() {
            return Err(PipelineError::Input(format!(
                "lane features have {} columns, model dim is {}",
                l_feat.cols(),
                self.dim()
            )));
        }
        let (t_out, t_cache) = self.temporal.forward(store, &flow.batch, &flow.mask)?;
        let spatial_mask = build_spatial_mask(l_feat.rows(), &t_out.validity, lane_mask)?;
        let (stages, f_cache) = self
            .fuser
            .forward(store, l_feat, &t_out.tf_feat, &spatial_mask)?;
        let f4 = stages.final_lane_update().clone();
        let l_feat_prime = self.composer.compose(store, &f4, l_feat, self.paradigm)?;
        if !l_feat_prime.is_finite() {
            return Err(NeuralError::NonFinite("composed lane features").into());
        }
        Ok((
            ModelOutput {
                l_feat_prime,
                tf_feat: t_out.tf_feat,
                stages,
                spatial_mask,
            },
            ModelCache {
                temporal: t_cache,
                fuse: f_cache,
                f4,
            },
        ))
    }

    /// Accumulates parameter gradients for `d L'` and returns `d L_feat`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ModelCache,
        d_out: &Tensor2D,
    ) -> Result<Tensor2D, PipelineError> {
        let (d_f4, mut d_l) = self
            .composer
            .backward(store, &cache.f4, d_out, self.paradigm)?;
        let (d_l_fuse, d_tf) = self.fuser.backward(store, &cache.fuse, &d_f4)?;
        d_l.add_assign(&d_l_fuse)?;
        self.temporal.backward(store, &cache.temporal, &d_tf)?;
        Ok(d_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskFill {
    pub total: f64,
    pub lane_to_lane: f64,
    pub lane_to_flow: f64,
    pub flow_to_lane: f64,
    pub flow_to_flow: f64,
}

impl MaskFill {
    pub fn of(m: &SpatialMask) -> Self {
        Self {
            total: m.bits.fill_ratio(),
            lane_to_lane: m.lane_to_lane().fill_ratio(),
            lane_to_flow: m.lane_to_flow().fill_ratio(),
            flow_to_lane: m.flow_to_lane().fill_ratio(),
            flow_to_flow: m.flow_to_flow().fill_ratio(),
        }
    }
}

/// Deterministic run summary. Wall-clock timings are kept apart so that the
/// diagnostics file is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub current_frame: i64,
    pub parse: ParseStats,
    pub flow: FlowCounts,
    /// Real instances fed to fusion; never above `n_t`.
    pub valid_instances: usize,
    pub capacity: usize,
    pub temporal_fill: f64,
    pub spatial_fill: MaskFill,
    pub lanes: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// `(stage, milliseconds)` in execution order.
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn lap(&mut self, stage: &str, since: &mut Instant) {
        let now = Instant::now();
        self.stages
            .push((stage.to_string(), (now - *since).as_secs_f64() * 1e3));
        *since = now;
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub l_feat_prime: Tensor2D,
    pub tf_feat: Tensor2D,
    pub flow: FlowFrameSet,
    pub temporal_mask: TemporalMask,
    pub spatial_mask: SpatialMask,
    pub diagnostics: Diagnostics,
    pub timings: Timings,
}

/// Last frame of a pose log, used when no current frame is given.
pub fn last_pose_frame(poses: &[u8]) -> Result<i64, PipelineError> {
    crate::flow_extract::read_poses(poses)?
        .keys()
        .next_back()
        .copied()
        .ok_or_else(|| PipelineError::Input("pose log is empty".into()))
}

/// Runs every stage on in-memory logs. An empty trajectory log is not an
/// error: fusion then sees only lane rows.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    store: &ParamStore,
    trajectories: &[u8],
    poses: &[u8],
    current_frame: Option<i64>,
    l_feat: &Tensor2D,
    lane_mask: Option<&BoolGrid>,
) -> Result<PipelineOutput, PipelineError> {
    let model = TfmModel::new(cfg)?;
    let mut timings = Timings::default();
    let mut t0 = Instant::now();
    let frame = match current_frame {
        Some(f) => f,
        None => last_pose_frame(poses)?,
    };
    let window =
        i64::try_from(cfg.window).map_err(|_| PipelineError::Config("window too large".into()))?;
    let parsed = parse_log(trajectories, poses, frame, window)?;
    timings.lap("extract", &mut t0);
    let prepared = prepare_flow(cfg, &parsed.flow)?;
    timings.lap("select", &mut t0);
    let (out, _) = model.forward(store, &prepared, l_feat, lane_mask)?;
    timings.lap("encode_fuse_compose", &mut t0);
    let diagnostics = Diagnostics {
        current_frame: frame,
        parse: parsed.stats,
        flow: prepared.counts,
        valid_instances: (0..out.spatial_mask.flow)
            .filter(|&t| out.spatial_mask.flow_to_flow().get(t, t))
            .count(),
        capacity: cfg.n_t,
        temporal_fill: prepared.mask.bits.fill_ratio(),
        spatial_fill: MaskFill::of(&out.spatial_mask),
        lanes: l_feat.rows(),
        dim: model.dim(),
    };
    Ok(PipelineOutput {
        l_feat_prime: out.l_feat_prime,
        tf_feat: out.tf_feat,
        flow: parsed.flow,
        temporal_mask: prepared.mask,
        spatial_mask: out.spatial_mask,
        diagnostics,
        timings,
    })
}
