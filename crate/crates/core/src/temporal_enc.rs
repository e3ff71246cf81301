//! Temporal domain encoder.
//!
//! Flow instances are filtered by how many valid frames they carry, ranked
//! by an ego-centric sector weight, capped or padded to a fixed count, and
//! encoded by masked self-attention over their frames. Each instance is
//! pooled into one feature row.

use serde::{Deserialize, Serialize};

use crate::flow_extract::{Category, FlowFrameSet, RangeSpec};
use crate::geometry::PointBEV;
use crate::neural::{
    BoolGrid, Init, Linear, MaskedBlock, MaskedBlockCache, NeuralError, ParamStore, Tensor2D,
};

#[derive(Debug, thiserror::Error)]
pub enum TemporalError {
    #[error("tole_pts must lie in [1, f_t]; got tole_pts={tole_pts}, f_t={f_t}")]
    InvalidTolerance { tole_pts: usize, f_t: usize },
    #[error("instance cap must be at least 1")]
    InvalidCapacity,
    #[error("{0} weights supplied for {1} candidates")]
    WeightCount(usize, usize),
    #[error("batch has {batch} frames but the encoder expects {encoder}")]
    FrameCount { batch: usize, encoder: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// A flow instance that passed the validity filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub track_id: String,
    pub category: Category,
    /// `frames[k]` is the center at frame `i - 1 - k` when that frame is
    /// present, in range, and not occluded.
    pub frames: Vec<Option<PointBEV>>,
}

impl Candidate {
    pub fn valid_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }
}

/// Keeps instances with at least `tole_pts` valid frames among the most
/// recent `f_t` frames.
pub fn validity_filter(
    flow: &FlowFrameSet,
    tole_pts: usize,
    f_t: usize,
) -> Result<Vec<Candidate>, TemporalError> {
    if tole_pts == 0 || tole_pts > f_t {
        return Err(TemporalError::InvalidTolerance { tole_pts, f_t });
    }
    Ok(flow
        .instances
        .iter()
        .filter_map(|inst| {
            let frames: Vec<Option<PointBEV>> = (0..f_t)
                .map(|k| {
                    inst.slots
                        .get(k)
                        .copied()
                        .flatten()
                        .filter(|s| !s.occluded)
                        .map(|s| s.center)
                })
                .collect();
            let cand = Candidate {
                track_id: inst.track_id.clone(),
                category: inst.category,
                frames,
            };
            (cand.valid_count() >= tole_pts).then_some(cand)
        })
        .collect())
}

/// Ego-centric weighting: full weight inside the frontal sector, cosine
/// falloff in bearing outside it, linear falloff in range past
/// `near_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorWeighting {
    /// Half-angle of the frontal sector, radians.
    pub half_angle: f64,
    /// Lower bound of the bearing factor.
    pub bearing_floor: f64,
    pub near_radius: f64,
    /// Range at which the distance factor reaches `range_floor`.
    pub far_radius: f64,
    pub range_floor: f64,
}

impl Default for SectorWeighting {
    fn default() -> Self {
        Self::for_range(&RangeSpec::default())
    }
}

impl SectorWeighting {
    pub fn for_range(range: &RangeSpec) -> Self {
        Self {
            half_angle: 30f64.to_radians(),
            bearing_floor: 0.25,
            near_radius: 30.0,
            far_radius: range.corner_distance(),
            range_floor: 0.5,
        }
    }

    pub fn bearing_factor(&self, p: PointBEV) -> f64 {
        if p.x == 0.0 && p.y == 0.0 {
            return 1.0;
        }
        let bearing = p.y.atan2(p.x).abs();
        if bearing <= self.half_angle && p.x > 0.0 {
            1.0
        } else {
            (bearing - self.half_angle)
                .max(0.0)
                .cos()
                .max(self.bearing_floor)
        }
    }

    pub fn range_factor(&self, p: PointBEV) -> f64 {
        let r = p.norm();
        if r <= self.near_radius || self.far_radius <= self.near_radius {
            return 1.0;
        }
        let t = ((r - self.near_radius) / (self.far_radius - self.near_radius)).min(1.0);
        1.0 - t * (1.0 - self.range_floor)
    }

    pub fn weight(&self, p: PointBEV) -> f64 {
        self.bearing_factor(p) * self.range_factor(p)
    }

    /// Maximum per-frame weight over the valid frames (0 if none).
    pub fn instance_weight(&self, cand: &Candidate) -> f64 {
        cand.frames
            .iter()
            .flatten()
            .map(|&p| self.weight(p))
            .fold(0.0, f64::max)
    }
}

/// Sector weight with the default range.
pub fn ego_sector_weight(center: PointBEV) -> f64 {
    SectorWeighting::default().weight(center)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSlot {
    /// `None` for padding.
    pub track_id: Option<String>,
    pub category: Category,
    /// Per-frame center; meaningful only where `valid[k]`.
    pub centers: Vec<PointBEV>,
    pub valid: Vec<bool>,
    pub instance_valid: bool,
    pub weight: f64,
}

impl InstanceSlot {
    fn padding(frames: usize) -> Self {
        Self {
            track_id: None,
            category: Category::Other,
            centers: vec![PointBEV::default(); frames],
            valid: vec![false; frames],
            instance_valid: false,
            weight: 0.0,
        }
    }
}

/// Fixed-shape batch of selected and padded flow instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedFlowBatch {
    pub slots: Vec<InstanceSlot>,
    pub frames: usize,
}

impl RefinedFlowBatch {
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn real_count(&self) -> usize {
        self.slots.iter().filter(|s| s.instance_valid).count()
    }

    pub fn validity(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.instance_valid).collect()
    }
}

/// `T_max × f_t` frame participation bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalMask {
    pub bits: BoolGrid,
}

impl TemporalMask {
    pub fn from_batch(batch: &RefinedFlowBatch) -> Self {
        Self {
            bits: BoolGrid::from_fn(batch.capacity(), batch.frames, |s, k| {
                batch.slots[s].instance_valid && batch.slots[s].valid[k]
            }),
        }
    }
}

/// Keeps the `t_max` highest-weight candidates (ties by ascending track id)
/// and pads the rest.
pub fn select_instances(
    candidates: &[Candidate],
    weights: &[f64],
    t_max: usize,
) -> Result<(RefinedFlowBatch, TemporalMask), TemporalError> {
    if t_max == 0 {
        return Err(TemporalError::InvalidCapacity);
    }
    if weights.len() != candidates.len() {
        return Err(TemporalError::WeightCount(weights.len(), candidates.len()));
    }
    let frames = candidates.first().map_or(0, |c| c.frames.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then_with(|| candidates[a].track_id.cmp(&candidates[b].track_id))
    });
    let mut slots: Vec<InstanceSlot> = order
        .iter()
        .take(t_max)
        .map(|&i| {
            let c = &candidates[i];
            InstanceSlot {
                track_id: Some(c.track_id.clone()),
                category: c.category,
                centers: c.frames.iter().map(|f| f.unwrap_or_default()).collect(),
                valid: c.frames.iter().map(Option::is_some).collect(),
                instance_valid: true,
                weight: weights[i],
            }
        })
        .collect();
    slots.resize_with(t_max, || InstanceSlot::padding(frames));
    let batch = RefinedFlowBatch { slots, frames };
    let mask = TemporalMask::from_batch(&batch);
    Ok((batch, mask))
}

/// Pads an empty batch of the given shape.
pub fn empty_batch(t_max: usize, frames: usize) -> (RefinedFlowBatch, TemporalMask) {
    let batch = RefinedFlowBatch {
        slots: (0..t_max).map(|_| InstanceSlot::padding(frames)).collect(),
        frames,
    };
    let mask = TemporalMask::from_batch(&batch);
    (batch, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalEncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub frames: usize,
    pub normalize_coords: bool,
    /// Perceptual region used for coordinate normalization.
    pub range: RangeSpec,
}

/// Per-frame embedding, masked self-attention over frames, masked mean pool.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    cfg: TemporalEncoderConfig,
    coord: Linear,
    category: String,
    position: String,
    block: MaskedBlock,
}

#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// `T_max × dim`; padded instances are zero rows.
    pub tf_feat: Tensor2D,
    /// Per-instance spatial validity consumed by the spatial mask.
    pub validity: Vec<bool>,
}

#[derive(Debug, Clone)]
struct InstanceCache {
    slot: usize,
    category: usize,
    valid: Vec<bool>,
    coords: Tensor2D,
    block: MaskedBlockCache,
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    instances: Vec<InstanceCache>,
    rows: usize,
}

impl TemporalEncoder {
    pub const PREFIX: &'static str = "temporal";

    pub fn new(cfg: TemporalEncoderConfig) -> Self {
        let p = Self::PREFIX;
        Self {
            cfg,
            coord: Linear::new(&format!("{p}.coord"), 2, cfg.dim),
            category: format!("{p}.category"),
            position: format!("{p}.position"),
            block: MaskedBlock::new(&format!("{p}.block"), cfg.dim, cfg.heads, cfg.ffn_dim),
        }
    }

    pub fn config(&self) -> &TemporalEncoderConfig {
        &self.cfg
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<(), NeuralError> {
        self.coord.register(store, Init::XavierUniform)?;
        store.register(
            &self.category,
            Category::ALL.len(),
            self.cfg.dim,
            Init::XavierUniform,
        )?;
        store.register(
            &self.position,
            self.cfg.frames,
            self.cfg.dim,
            Init::XavierUniform,
        )?;
        self.block.register(store, false)
    }

    /// Coordinate channels fed to the embedding, one row per frame.
    pub fn coordinate_features(&self, slot: &InstanceSlot) -> Tensor2D {
        let mut c = Tensor2D::zeros(slot.centers.len(), 2);
        for (k, p) in slot.centers.iter().enumerate() {
            if !slot.valid[k] {
                continue;
            }
            let (x, y) = if self.cfg.normalize_coords {
                self.cfg.range.normalize(*p)
            } else {
                (p.x, p.y)
            };
            c[(k, 0)] = x;
            c[(k, 1)] = y;
        }
        c
    }

    fn check(&self, batch: &RefinedFlowBatch, mask: &TemporalMask) -> Result<(), TemporalError> {
        if batch.frames != self.cfg.frames {
            return Err(TemporalError::FrameCount {
                batch: batch.frames,
                encoder: self.cfg.frames,
            });
        }
        if mask.bits.rows() != batch.capacity() || mask.bits.cols() != batch.frames {
            return Err(NeuralError::Shape {
                op: "encode_temporal",
                expected: format!("mask {}x{}", batch.capacity(), batch.frames),
                got: format!("mask {}x{}", mask.bits.rows(), mask.bits.cols()),
            }
            .into());
        }
        Ok(())
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        batch: &RefinedFlowBatch,
        mask: &TemporalMask,
    ) -> Result<TemporalOutput, TemporalError> {
        self.forward(store, batch, mask).map(|(out, _)| out)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        batch: &RefinedFlowBatch,
        mask: &TemporalMask,
    ) -> Result<(TemporalOutput, TemporalCache), TemporalError> {
        self.check(batch, mask)?;
        let dim = self.cfg.dim;
        let frames = batch.frames;
        let mut tf_feat = Tensor2D::zeros(batch.capacity(), dim);
        let mut validity = vec![false; batch.capacity()];
        let mut instances = Vec::new();
        let cat_table = store.get(&self.category)?;
        let pos_table = store.get(&self.position)?;

        for (s, slot) in batch.slots.iter().enumerate() {
            if !slot.instance_valid {
                continue;
            }
            let valid: Vec<bool> = (0..frames).map(|k| mask.bits.get(s, k)).collect();
            let n_valid = valid.iter().filter(|&&v| v).count();
            if n_valid == 0 {
                continue;
            }
            validity[s] = true;
            let coords = self.coordinate_features(slot);
            let mut tokens = self.coord.forward(store, &coords)?;
            let cat = slot.category.index();
            for k in 0..frames {
                let row = tokens.row_mut(k);
                if !valid[k] {
                    row.fill(0.0);
                    continue;
                }
                for (c, v) in row.iter_mut().enumerate() {
                    *v += cat_table[(cat, c)] + pos_table[(k, c)];
                }
            }
            let frame_mask = BoolGrid::from_fn(frames, frames, |a, b| valid[a] && valid[b]);
            let (out, block) = self.block.forward(store, &tokens, &tokens, &frame_mask)?;
            let inv = 1.0 / n_valid as f64;
            let pooled = tf_feat.row_mut(s);
            for k in (0..frames).filter(|&k| valid[k]) {
                for (p, v) in pooled.iter_mut().zip(out.row(k)) {
                    *p += v * inv;
                }
            }
            instances.push(InstanceCache {
                slot: s,
                category: cat,
                valid,
                coords,
                block,
            });
        }
        let rows = batch.capacity();
        Ok((
            TemporalOutput { tf_feat, validity },
            TemporalCache { instances, rows },
        ))
    }

    /// Accumulates parameter gradients given `d tf_feat`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &TemporalCache,
        d_feat: &Tensor2D,
    ) -> Result<(), TemporalError> {
        let dim = self.cfg.dim;
        if d_feat.rows() != cache.rows || d_feat.cols() != dim {
            return Err(NeuralError::Shape {
                op: "temporal_backward",
                expected: format!("{}x{dim}", cache.rows),
                got: format!("{}x{}", d_feat.rows(), d_feat.cols()),
            }
            .into());
        }
        let frames = self.cfg.frames;
        let mut d_cat = Tensor2D::zeros(Category::ALL.len(), dim);
        let mut d_pos = Tensor2D::zeros(frames, dim);
        for inst in &cache.instances {
            let n_valid = inst.valid.iter().filter(|&&v| v).count();
            let inv = 1.0 / n_valid as f64;
            let mut d_out = Tensor2D::zeros(frames, dim);
            for k in (0..frames).filter(|&k| inst.valid[k]) {
                for (d, g) in d_out.row_mut(k).iter_mut().zip(d_feat.row(inst.slot)) {
                    *d = g * inv;
                }
            }
            let (dq, dkv) = self.block.backward(store, &inst.block, &d_out)?;
            let mut d_tokens = dq;
            d_tokens.add_assign(&dkv)?;
            for k in 0..frames {
                if !inst.valid[k] {
                    d_tokens.row_mut(k).fill(0.0);
                    continue;
                }
                for c in 0..dim {
                    let g = d_tokens[(k, c)];
                    d_cat[(inst.category, c)] += g;
                    d_pos[(k, c)] += g;
                }
            }
            self.coord.backward(store, &inst.coords, &d_tokens)?;
        }
        store.accumulate(&self.category, &d_cat)?;
        store.accumulate(&self.position, &d_pos)?;
        Ok(())
    }
}
