//! Spatial domain encoder.
//!
//! Lane rows and flow rows share one `(L+T) × (L+T)` block mask. Four
//! masked-attention modules run in a fixed order, each reading only its own
//! block:
//!
//! | module | queries | keys  | block       |
//! |--------|---------|-------|-------------|
//! | 1      | flow    | flow  | `M_{T→T}`   |
//! | 2      | flow    | lanes | `M_{T→L}`   |
//! | 3      | lanes   | flow  | `M_{L→T}`   |
//! | 4      | lanes   | lanes | `M_{L→L}`   |
//!
//! Module outputs are reported as fused updates: the change each module
//! stack has made to its query rows relative to the input features. The
//! lane update after module 4 feeds the paradigm-aware composition
//! `L' = T(F4) + I(paradigm) · L`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::neural::{
    BoolGrid, Init, Linear, MaskedBlock, MaskedBlockCache, NeuralError, ParamStore, Tensor2D,
};

#[derive(Debug, thiserror::Error)]
pub enum SpatialError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// The `(L+T) × (L+T)` attention mask, lanes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialMask {
    pub lanes: usize,
    pub flow: usize,
    pub bits: BoolGrid,
}

impl SpatialMask {
    pub fn size(&self) -> usize {
        self.lanes + self.flow
    }

    pub fn lane_to_lane(&self) -> BoolGrid {
        self.bits.block(0, 0, self.lanes, self.lanes)
    }

    pub fn lane_to_flow(&self) -> BoolGrid {
        self.bits.block(0, self.lanes, self.lanes, self.flow)
    }

    pub fn flow_to_lane(&self) -> BoolGrid {
        self.bits.block(self.lanes, 0, self.flow, self.lanes)
    }

    pub fn flow_to_flow(&self) -> BoolGrid {
        self.bits
            .block(self.lanes, self.lanes, self.flow, self.flow)
    }
}

/// Builds `M_s` from per-instance flow validity and an optional upstream
/// lane mask (all-true when absent).
pub fn build_spatial_mask(
    lanes: usize,
    flow_validity: &[bool],
    upstream_lane_mask: Option<&BoolGrid>,
) -> Result<SpatialMask, SpatialError> {
    if lanes == 0 {
        return Err(SpatialError::Dimension(
            "at least one lane row is required".into(),
        ));
    }
    if let Some(m) = upstream_lane_mask {
        if m.rows() != lanes || m.cols() != lanes {
            return Err(SpatialError::Dimension(format!(
                "upstream lane mask is {}x{}, expected {lanes}x{lanes}",
                m.rows(),
                m.cols()
            )));
        }
    }
    let t = flow_validity.len();
    let bits = BoolGrid::from_fn(lanes + t, lanes + t, |r, c| match (r < lanes, c < lanes) {
        (true, true) => upstream_lane_mask.is_none_or(|m| m.get(r, c)),
        (true, false) => flow_validity[c - lanes],
        (false, true) => flow_validity[r - lanes],
        (false, false) => flow_validity[r - lanes] && flow_validity[c - lanes],
    });
    Ok(SpatialMask {
        lanes,
        flow: t,
        bits,
    })
}

/// Compact mask description used on disk: flow validity plus an optional
/// upstream lane mask. The lane count comes from the lane feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub flow_validity: Vec<bool>,
    #[serde(default)]
    pub lane_mask: Option<Vec<Vec<bool>>>,
}

impl MaskSpec {
    pub fn build(&self, lanes: usize) -> Result<SpatialMask, SpatialError> {
        let upstream = match &self.lane_mask {
            Some(rows) => Some(
                BoolGrid::from_rows(rows)
                    .ok_or_else(|| SpatialError::Dimension("ragged lane mask rows".into()))?,
            ),
            None => None,
        };
        build_spatial_mask(lanes, &self.flow_validity, upstream.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pipe {
    /// All four modules.
    #[serde(rename = "all")]
    All,
    /// Only the lane-query modules (3 and 4).
    #[serde(rename = "lt-ll")]
    LtLl,
}

impl FromStr for Pipe {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Pipe::All),
            "lt-ll" | "lt_ll" => Ok(Pipe::LtLl),
            other => Err(format!("unknown pipe `{other}` (expected all or lt-ll)")),
        }
    }
}

impl fmt::Display for Pipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipe::All => "all",
            Pipe::LtLl => "lt-ll",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub pipe: Pipe,
    pub depth: usize,
    pub normalize_coords: bool,
    pub heads: usize,
    pub dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            pipe: Pipe::LtLl,
            depth: 1,
            normalize_coords: true,
            heads: 4,
            dim: 32,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), SpatialError> {
        if !(1..=3).contains(&self.depth) {
            return Err(SpatialError::Config(format!(
                "depth must be 1, 2 or 3, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(SpatialError::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryParadigm {
    InstanceBased,
    PointLevel,
}

impl QueryParadigm {
    /// 0 for instance-based queries, 1 for point-level ones.
    pub fn indicator(self) -> f64 {
        match self {
            QueryParadigm::InstanceBased => 0.0,
            QueryParadigm::PointLevel => 1.0,
        }
    }
}

impl FromStr for QueryParadigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance" | "instance_based" => Ok(QueryParadigm::InstanceBased),
            "point" | "point_level" => Ok(QueryParadigm::PointLevel),
            other => Err(format!(
                "unknown paradigm `{other}` (expected instance or point)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Module {
    FlowToFlow,
    FlowToLane,
    LaneToFlow,
    LaneToLane,
}

impl Module {
    const ORDER: [Module; 4] = [
        Module::FlowToFlow,
        Module::FlowToLane,
        Module::LaneToFlow,
        Module::LaneToLane,
    ];

    fn tag(self) -> &'static str {
        match self {
            Module::FlowToFlow => "m1_tt",
            Module::FlowToLane => "m2_tl",
            Module::LaneToFlow => "m3_lt",
            Module::LaneToLane => "m4_ll",
        }
    }

    fn enabled(self, pipe: Pipe) -> bool {
        pipe == Pipe::All || matches!(self, Module::LaneToFlow | Module::LaneToLane)
    }
}

/// Fused updates after each module. `stages[0]` and `stages[1]` have one row
/// per flow instance, `stages[2]` and `stages[3]` one row per lane element.
/// A skipped module leaves its predecessor's update in place.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStages {
    pub stages: [Tensor2D; 4],
}

impl FusedStages {
    pub fn final_lane_update(&self) -> &Tensor2D {
        &self.stages[3]
    }
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    /// Block caches per module in execution order.
    modules: Vec<(Module, Vec<MaskedBlockCache>)>,
    lanes: usize,
    flow: usize,
}

/// Stack of the four masked-attention fusion modules.
#[derive(Debug, Clone)]
pub struct Fuser {
    cfg: FusionConfig,
    modules: Vec<(Module, Vec<MaskedBlock>)>,
}

impl Fuser {
    pub const PREFIX: &'static str = "fuse";

    pub fn new(cfg: FusionConfig) -> Result<Self, SpatialError> {
        cfg.validate()?;
        let modules = Module::ORDER
            .into_iter()
            .filter(|m| m.enabled(cfg.pipe))
            .map(|m| {
                let blocks = (0..cfg.depth)
                    .map(|d| {
                        MaskedBlock::new(
                            &format!("{}.{}.l{d}", Self::PREFIX, m.tag()),
                            cfg.dim,
                            cfg.heads,
                            cfg.ffn_dim(),
                        )
                    })
                    .collect();
                (m, blocks)
            })
            .collect();
        Ok(Self { cfg, modules })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// `zero_output` zero-initializes every output projection so that each
    /// module starts as an exact identity.
    pub fn register(&self, store: &mut ParamStore, zero_output: bool) -> Result<(), NeuralError> {
        for (_, blocks) in &self.modules {
            for b in blocks {
                b.register(store, zero_output)?;
            }
        }
        Ok(())
    }

    fn check_inputs(
        &self,
        l_feat: &Tensor2D,
        tf_feat: &Tensor2D,
        mask: &SpatialMask,
    ) -> Result<(), SpatialError> {
        let dim = self.cfg.dim;
        if l_feat.cols() != dim || tf_feat.cols() != dim {
            return Err(SpatialError::Dimension(format!(
                "feature widths lane={} flow={} but fusion dim={dim}",
                l_feat.cols(),
                tf_feat.cols()
            )));
        }
        if mask.lanes != l_feat.rows() || mask.flow != tf_feat.rows() {
            return Err(SpatialError::Dimension(format!(
                "mask covers {} lanes + {} flow rows, features have {} + {}",
                mask.lanes,
                mask.flow,
                l_feat.rows(),
                tf_feat.rows()
            )));
        }
        if !l_feat.is_finite() {
            return Err(SpatialError::NonFinite("lane features"));
        }
        if !tf_feat.is_finite() {
            return Err(SpatialError::NonFinite("flow features"));
        }
        Ok(())
    }

    pub fn fuse(
        &self,
        store: &ParamStore,
        l_feat: &Tensor2D,
        tf_feat: &Tensor2D,
        mask: &SpatialMask,
    ) -> Result<FusedStages, SpatialError> {
        self.forward(store, l_feat, tf_feat, mask).map(|(s, _)| s)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        l_feat: &Tensor2D,
        tf_feat: &Tensor2D,
        mask: &SpatialMask,
    ) -> Result<(FusedStages, FuseCache), SpatialError> {
        self.check_inputs(l_feat, tf_feat, mask)?;
        let mut lanes = l_feat.clone();
        let mut flow = tf_feat.clone();
        let mut caches = Vec::with_capacity(self.modules.len());
        let mut stages: Vec<Tensor2D> = Vec::with_capacity(4);
        let mut module_iter = self.modules.iter().peekable();
        for m in Module::ORDER {
            if let Some((_, blocks)) = module_iter.next_if(|(mm, _)| *mm == m) {
                let mut block_caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (out, c) = match m {
                        Module::FlowToFlow => {
                            b.forward(store, &flow, &flow, &mask.flow_to_flow())?
                        }
                        Module::FlowToLane => {
                            b.forward(store, &flow, &lanes, &mask.flow_to_lane())?
                        }
                        Module::LaneToFlow => {
                            b.forward(store, &lanes, &flow, &mask.lane_to_flow())?
                        }
                        Module::LaneToLane => {
                            b.forward(store, &lanes, &lanes, &mask.lane_to_lane())?
                        }
                    };
                    match m {
                        Module::FlowToFlow | Module::FlowToLane => flow = out,
                        Module::LaneToFlow | Module::LaneToLane => lanes = out,
                    }
                    block_caches.push(c);
                }
                caches.push((m, block_caches));
            }
            stages.push(match m {
                Module::FlowToFlow | Module::FlowToLane => flow.sub(tf_feat)?,
                Module::LaneToFlow | Module::LaneToLane => lanes.sub(l_feat)?,
            });
        }
        let stages: [Tensor2D; 4] = stages.try_into().expect("four modules");
        if !stages.iter().all(Tensor2D::is_finite) {
            return Err(SpatialError::NonFinite("fused features"));
        }
        Ok((
            FusedStages { stages },
            FuseCache {
                modules: caches,
                lanes: l_feat.rows(),
                flow: tf_feat.rows(),
            },
        ))
    }

    /// Given `d F4`, accumulates parameter gradients and returns gradients
    /// with respect to `(l_feat, tf_feat)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FuseCache,
        d_final: &Tensor2D,
    ) -> Result<(Tensor2D, Tensor2D), SpatialError> {
        let dim = self.cfg.dim;
        if d_final.rows() != cache.lanes || d_final.cols() != dim {
            return Err(SpatialError::Dimension(format!(
                "gradient is {}x{}, expected {}x{dim}",
                d_final.rows(),
                d_final.cols(),
                cache.lanes
            )));
        }
        // F4 = lanes_4 - l_feat
        let mut d_lanes = d_final.clone();
        let mut d_flow = Tensor2D::zeros(cache.flow, dim);
        let mut d_l_feat = d_final.scale(-1.0);
        for ((m, blocks), (_, block_caches)) in self.modules.iter().zip(&cache.modules).rev() {
            for (b, c) in blocks.iter().zip(block_caches).rev() {
                match m {
                    Module::LaneToLane => {
                        let (dq, dkv) = b.backward(store, c, &d_lanes)?;
                        d_lanes = dq.add(&dkv)?;
                    }
                    Module::LaneToFlow => {
                        let (dq, dkv) = b.backward(store, c, &d_lanes)?;
                        d_lanes = dq;
                        d_flow.add_assign(&dkv)?;
                    }
                    Module::FlowToLane => {
                        let (dq, dkv) = b.backward(store, c, &d_flow)?;
                        d_flow = dq;
                        d_l_feat.add_assign(&dkv)?;
                    }
                    Module::FlowToFlow => {
                        let (dq, dkv) = b.backward(store, c, &d_flow)?;
                        d_flow = dq.add(&dkv)?;
                    }
                }
            }
        }
        d_l_feat.add_assign(&d_lanes)?;
        Ok((d_l_feat, d_flow))
    }
}

/// `L' = T(F4) + I(paradigm) · L_feat` with a learned affine `T`.
#[derive(Debug, Clone)]
pub struct Composer {
    transform: Linear,
}

impl Composer {
    pub const PREFIX: &'static str = "compose";

    pub fn new(dim: usize) -> Self {
        Self {
            transform: Linear::new(&format!("{}.transform", Self::PREFIX), dim, dim),
        }
    }

    /// Registers the transform initialized to the identity.
    pub fn register(&self, store: &mut ParamStore) -> Result<(), NeuralError> {
        self.transform.register(store, Init::Identity)
    }

    pub fn transform(&self) -> &Linear {
        &self.transform
    }

    pub fn compose(
        &self,
        store: &ParamStore,
        f4: &Tensor2D,
        l_feat: &Tensor2D,
        paradigm: QueryParadigm,
    ) -> Result<Tensor2D, SpatialError> {
        if f4.shape() != l_feat.shape() {
            return Err(SpatialError::Dimension(format!(
                "fused features {}x{} vs lane features {}x{}",
                f4.rows(),
                f4.cols(),
                l_feat.rows(),
                l_feat.cols()
            )));
        }
        let mut out = self.transform.forward(store, f4)?;
        if paradigm == QueryParadigm::PointLevel {
            out.add_assign(l_feat)?;
        }
        Ok(out)
    }

    /// Returns `(d F4, d L_feat)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        f4: &Tensor2D,
        d_out: &Tensor2D,
        paradigm: QueryParadigm,
    ) -> Result<(Tensor2D, Tensor2D), SpatialError> {
        let d_f4 = self.transform.backward(store, f4, d_out)?;
        Ok((d_f4, d_out.scale(paradigm.indicator())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        let m = build_spatial_mask(2, &[true, false], None).unwrap();
        assert_eq!(
            m.lane_to_flow().to_rows(),
            vec![vec![true, false], vec![true, false]]
        );
        assert_eq!(
            m.flow_to_lane().to_rows(),
            vec![vec![true, true], vec![false, false]]
        );
        assert_eq!(
            m.flow_to_flow().to_rows(),
            vec![vec![true, false], vec![false, false]]
        );

        let none = build_spatial_mask(3, &[false; 4], None).unwrap();
        assert_eq!(none.lane_to_lane().count_true(), 9);
        assert_eq!(none.bits.count_true(), 9);

        let all = build_spatial_mask(3, &[true; 4], None).unwrap();
        assert_eq!(all.bits.count_true(), 49);
    }

    #[test]
    fn upstream_lane_mask_is_copied_verbatim() {
        let up = BoolGrid::from_fn(3, 3, |r, c| r >= c);
        let m = build_spatial_mask(3, &[true, true], Some(&up)).unwrap();
        assert_eq!(m.lane_to_lane(), up);
        assert!(build_spatial_mask(2, &[true], Some(&up)).is_err());
        assert!(build_spatial_mask(0, &[true], None).is_err());
    }

    #[test]
    fn mask_spec_round_trip() {
        let spec = MaskSpec {
            flow_validity: vec![true, false, true],
            lane_mask: None,
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: MaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(
            back.build(2).unwrap(),
            build_spatial_mask(2, &spec.flow_validity, None).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        let bad_depth = FusionConfig {
            depth: 4,
            ..FusionConfig::default()
        };
        assert!(bad_depth.validate().is_err());
        let bad_heads = FusionConfig {
            heads: 3,
            ..FusionConfig::default()
        };
        assert!(Fuser::new(bad_heads).is_err());
    }

    fn setup(pipe: Pipe) -> (Fuser, ParamStore) {
        let cfg = FusionConfig {
            pipe,
            depth: 1,
            normalize_coords: true,
            heads: 2,
            dim: 4,
        };
        let fuser = Fuser::new(cfg).unwrap();
        let mut store = ParamStore::new(5);
        fuser.register(&mut store, false).unwrap();
        (fuser, store)
    }

    fn feat(rows: usize, seed: f64) -> Tensor2D {
        Tensor2D::from_vec(
            rows,
            4,
            (0..rows * 4)
                .map(|i| (i as f64 * 0.7 + seed).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn skipped_modules_match_all_without_flow() {
        let (lt, store) = setup(Pipe::LtLl);
        let (all, mut store_all) = setup(Pipe::All);
        // Share the lane-module weights.
        for (name, p) in store.iter() {
            store_all.set(name, p.value.clone()).unwrap();
        }
        let mask = build_spatial_mask(3, &[false, false], None).unwrap();
        let l = feat(3, 0.1);
        let t = feat(2, 0.9);
        let a = lt.fuse(&store, &l, &t, &mask).unwrap();
        let b = all.fuse(&store_all, &l, &t, &mask).unwrap();
        assert_eq!(a.final_lane_update(), b.final_lane_update());
        assert!(b.stages[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let (fuser, store) = setup(Pipe::LtLl);
        let mask = build_spatial_mask(3, &[true, true], None).unwrap();
        let l = feat(3, 0.0);
        let t = feat(2, 0.0);
        let narrow = Tensor2D::zeros(3, 2);
        assert!(matches!(
            fuser.fuse(&store, &narrow, &t, &mask),
            Err(SpatialError::Dimension(_))
        ));
        let mut bad = l.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(
            fuser.fuse(&store, &bad, &t, &mask),
            Err(SpatialError::NonFinite(_))
        ));
        let small = build_spatial_mask(2, &[true, true], None).unwrap();
        assert!(fuser.fuse(&store, &l, &t, &small).is_err());
    }

    #[test]
    fn compose_examples() {
        let c = Composer::new(4);
        let mut store = ParamStore::new(0);
        c.register(&mut store).unwrap();
        let f4 = feat(3, 0.3);
        let l = feat(3, 1.7);
        assert_eq!(
            c.compose(&store, &f4, &l, QueryParadigm::InstanceBased)
                .unwrap(),
            f4
        );
        let zero = Tensor2D::zeros(3, 4);
        assert_eq!(
            c.compose(&store, &zero, &l, QueryParadigm::PointLevel)
                .unwrap(),
            l
        );
        let sum = c
            .compose(&store, &f4, &l, QueryParadigm::PointLevel)
            .unwrap();
        assert!(sum.max_abs_diff(&f4.add(&l).unwrap()) <= 1e-12);
        assert!(c
            .compose(&store, &f4, &feat(2, 0.0), QueryParadigm::PointLevel)
            .is_err());
    }
}
