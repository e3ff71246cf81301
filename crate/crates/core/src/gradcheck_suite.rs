//! Seeded finite-difference checks for every differentiable op.
//!
//! Each check builds a toy instance from `seed`: parameters at their
//! registered initialization (fusion output projections not zeroed, so every
//! path carries gradient), inputs uniform in [-1, 1], and a random linear
//! read-out as the scalar loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow_extract::{Category, RangeSpec};
use crate::geometry::PointBEV;
use crate::neural::{
    analytic_param_gradient, attention_backward, attention_forward, compare, gelu, gelu_grad,
    grad_check, grad_check_params, numeric_param_gradient, BoolGrid, GradCheckReport, Init,
    LayerNorm, Linear, MaskedBlock, MultiHeadAttention, ParamStore, Tensor2D,
};
use crate::spatial_enc::{
    build_spatial_mask, Composer, Fuser, FusionConfig, Pipe, QueryParadigm, SpatialMask,
};
use crate::temporal_enc::{
    select_instances, Candidate, RefinedFlowBatch, TemporalEncoder, TemporalEncoderConfig,
    TemporalMask,
};

/// Toy sizes for the fuse stack check.
pub const TOY_LANES: usize = 4;
pub const TOY_FLOW: usize = 3;
pub const TOY_DIM: usize = 8;
pub const TOY_HEADS: usize = 2;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

fn outcome(name: impl Into<String>, report: GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        report,
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized")
}

fn readout(out: &Tensor2D, w: &Tensor2D) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Checks the gradient of `f` with respect to one input tensor.
fn input_check(
    x: &Tensor2D,
    analytic: &Tensor2D,
    h: f64,
    f: impl Fn(&Tensor2D) -> f64,
) -> GradCheckReport {
    let (r, c) = x.shape();
    grad_check(
        |flat| f(&Tensor2D::from_vec(r, c, flat.to_vec()).expect("sized")),
        analytic.data(),
        x.data(),
        h,
    )
}

pub fn check_attention(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = uniform(&mut rng, 3, 4);
    let k = uniform(&mut rng, 3, 4);
    let v = uniform(&mut rng, 3, 4);
    let w = uniform(&mut rng, 3, 4);
    let mask = BoolGrid::from_fn(3, 3, |i, j| !(i == 0 && j == 2));
    let (_, cache) = attention_forward(&q, &k, &v, &mask, 2).expect("shapes");
    let g = attention_backward(&cache, &w).expect("shapes");
    let run = |q: &Tensor2D, k: &Tensor2D, v: &Tensor2D| {
        readout(&attention_forward(q, k, v, &mask, 2).expect("shapes").0, &w)
    };
    vec![
        outcome(
            "attention.dq",
            input_check(&q, &g.dq, h, |t| run(t, &k, &v)),
        ),
        outcome(
            "attention.dk",
            input_check(&k, &g.dk, h, |t| run(&q, t, &v)),
        ),
        outcome(
            "attention.dv",
            input_check(&v, &g.dv, h, |t| run(&q, &k, t)),
        ),
    ]
}

pub fn check_gelu(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let analytic: Vec<f64> = x.iter().map(|&v| gelu_grad(v)).collect();
    let f = |p: &[f64]| -> f64 { p.iter().map(|&v| gelu(v)).sum() };
    vec![outcome("gelu", grad_check(f, &analytic, &x, h))]
}

pub fn check_linear(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = Linear::new("lin", 5, 3);
    let mut store = ParamStore::new(seed);
    lin.register(&mut store, Init::XavierUniform)
        .expect("fresh store");
    let x = uniform(&mut rng, 2, 5);
    let w = uniform(&mut rng, 2, 3);
    let params = grad_check_params(
        &store,
        |s| readout(&lin.forward(s, &x).expect("shapes"), &w),
        |s| {
            lin.backward(s, &x, &w).expect("shapes");
        },
        h,
    );
    let mut s = store.clone();
    let dx = lin.backward(&mut s, &x, &w).expect("shapes");
    let input = input_check(&x, &dx, h, |t| {
        readout(&lin.forward(&store, t).expect("shapes"), &w)
    });
    vec![
        outcome("linear.params", params),
        outcome("linear.input", input),
    ]
}

pub fn check_layer_norm(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln = LayerNorm::new("ln", 6);
    let mut store = ParamStore::new(seed);
    ln.register(&mut store).expect("fresh store");
    let x = uniform(&mut rng, 4, 6);
    let w = uniform(&mut rng, 4, 6);
    let params = grad_check_params(
        &store,
        |s| readout(&ln.forward(s, &x).expect("shapes").0, &w),
        |s| {
            let (_, c) = ln.forward(s, &x).expect("shapes");
            ln.backward(s, &c, &w).expect("shapes");
        },
        h,
    );
    let mut s = store.clone();
    let (_, c) = ln.forward(&s, &x).expect("shapes");
    let dx = ln.backward(&mut s, &c, &w).expect("shapes");
    let input = input_check(&x, &dx, h, |t| {
        readout(&ln.forward(&store, t).expect("shapes").0, &w)
    });
    vec![
        outcome("layer_norm.params", params),
        outcome("layer_norm.input", input),
    ]
}

pub fn check_multi_head(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mha = MultiHeadAttention::new("mha", 4, 2);
    let mut store = ParamStore::new(seed);
    mha.register(&mut store, false).expect("fresh store");
    let xq = uniform(&mut rng, 3, 4);
    let xkv = uniform(&mut rng, 5, 4);
    let w = uniform(&mut rng, 3, 4);
    let mask = BoolGrid::from_fn(3, 5, |i, j| (i + j) % 3 != 0);
    let run = |s: &ParamStore, q: &Tensor2D, kv: &Tensor2D| {
        readout(&mha.forward(s, q, kv, &mask).expect("shapes").0, &w)
    };
    let params = grad_check_params(
        &store,
        |s| run(s, &xq, &xkv),
        |s| {
            let (_, c) = mha.forward(s, &xq, &xkv, &mask).expect("shapes");
            mha.backward(s, &c, &w).expect("shapes");
        },
        h,
    );
    let mut s = store.clone();
    let (_, c) = mha.forward(&s, &xq, &xkv, &mask).expect("shapes");
    let (dq, dkv) = mha.backward(&mut s, &c, &w).expect("shapes");
    vec![
        outcome("multi_head.params", params),
        outcome(
            "multi_head.query",
            input_check(&xq, &dq, h, |t| run(&store, t, &xkv)),
        ),
        outcome(
            "multi_head.key_value",
            input_check(&xkv, &dkv, h, |t| run(&store, &xq, t)),
        ),
    ]
}

/// A scalar loss over a parameter store together with its analytic gradient.
pub struct ParamProblem {
    pub name: String,
    pub store: ParamStore,
    loss: Box<dyn Fn(&ParamStore) -> f64>,
    grads: Box<dyn Fn(&mut ParamStore)>,
}

impl ParamProblem {
    pub fn loss(&self, store: &ParamStore) -> f64 {
        (self.loss)(store)
    }

    /// Flattened analytic gradient, parameters in name order.
    pub fn analytic(&self) -> Vec<f64> {
        analytic_param_gradient(&self.store, |s| (self.grads)(s))
    }

    pub fn numeric(&self, h: f64) -> Vec<f64> {
        numeric_param_gradient(&self.store, |s| (self.loss)(s), h)
    }

    pub fn check(&self, h: f64) -> GradCheckReport {
        compare(&self.analytic(), &self.numeric(h))
    }
}

struct BlockCase {
    block: MaskedBlock,
    store: ParamStore,
    xq: Tensor2D,
    xkv: Tensor2D,
    w: Tensor2D,
    mask: BoolGrid,
}

impl BlockCase {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = MaskedBlock::new("blk", TOY_DIM, TOY_HEADS, 2 * TOY_DIM);
        let mut store = ParamStore::new(seed);
        block.register(&mut store, false).expect("fresh store");
        let xq = uniform(&mut rng, 4, TOY_DIM);
        let xkv = uniform(&mut rng, 3, TOY_DIM);
        let w = uniform(&mut rng, 4, TOY_DIM);
        // Row 3 has no visible key and passes through.
        let mask = BoolGrid::from_fn(4, 3, |i, j| i != 3 && (i + j) % 2 == 0);
        BlockCase {
            block,
            store,
            xq,
            xkv,
            w,
            mask,
        }
    }

    fn run(&self, s: &ParamStore, q: &Tensor2D, kv: &Tensor2D) -> f64 {
        readout(
            &self.block.forward(s, q, kv, &self.mask).expect("shapes").0,
            &self.w,
        )
    }

    fn grads(&self, s: &mut ParamStore) -> (Tensor2D, Tensor2D) {
        let (_, c) = self
            .block
            .forward(s, &self.xq, &self.xkv, &self.mask)
            .expect("shapes");
        self.block.backward(s, &c, &self.w).expect("shapes")
    }

    fn problem(self) -> ParamProblem {
        let store = self.store.clone();
        let case = Rc::new(self);
        let (a, b) = (Rc::clone(&case), case);
        ParamProblem {
            name: "masked_block.params".into(),
            store,
            loss: Box::new(move |s| a.run(s, &a.xq, &a.xkv)),
            grads: Box::new(move |s| {
                b.grads(s);
            }),
        }
    }
}

pub fn check_masked_block(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let case = BlockCase::new(seed);
    let mut s = case.store.clone();
    let (dq, dkv) = case.grads(&mut s);
    let store = &case.store;
    let query = input_check(&case.xq, &dq, h, |t| case.run(store, t, &case.xkv));
    let key_value = input_check(&case.xkv, &dkv, h, |t| case.run(store, &case.xq, t));
    let params = case.problem().check(h);
    vec![
        outcome("masked_block.params", params),
        outcome("masked_block.query", query),
        outcome("masked_block.key_value", key_value),
    ]
}

struct TemporalCase {
    enc: TemporalEncoder,
    store: ParamStore,
    batch: RefinedFlowBatch,
    mask: TemporalMask,
    w: Tensor2D,
}

impl TemporalCase {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 4;
        let enc = TemporalEncoder::new(TemporalEncoderConfig {
            dim: TOY_DIM,
            heads: TOY_HEADS,
            ffn_dim: 2 * TOY_DIM,
            frames,
            normalize_coords: true,
            range: RangeSpec::default(),
        });
        let mut store = ParamStore::new(seed);
        enc.register(&mut store).expect("fresh store");
        let point = |rng: &mut ChaCha8Rng| {
            rng.random_bool(0.7).then(|| {
                PointBEV::new(rng.random_range(-40.0..40.0), rng.random_range(-20.0..20.0))
            })
        };
        let cands: Vec<Candidate> = (0..2)
            .map(|i| {
                let mut pts: Vec<Option<PointBEV>> = (0..frames).map(|_| point(&mut rng)).collect();
                pts[0] = Some(PointBEV::new(10.0 - 20.0 * i as f64, 2.0));
                Candidate {
                    track_id: format!("t{i}"),
                    category: Category::ALL[i % Category::ALL.len()],
                    frames: pts,
                }
            })
            .collect();
        let (batch, mask) = select_instances(&cands, &[1.0, 0.5], TOY_FLOW).expect("capacity");
        let w = uniform(&mut rng, TOY_FLOW, TOY_DIM);
        TemporalCase {
            enc,
            store,
            batch,
            mask,
            w,
        }
    }

    fn problem(self) -> ParamProblem {
        let store = self.store.clone();
        let case = Rc::new(self);
        let (a, b) = (Rc::clone(&case), case);
        ParamProblem {
            name: "temporal_encoder.params".into(),
            store,
            loss: Box::new(move |s| {
                readout(
                    &a.enc.encode(s, &a.batch, &a.mask).expect("shapes").tf_feat,
                    &a.w,
                )
            }),
            grads: Box::new(move |s| {
                let (_, c) = b.enc.forward(s, &b.batch, &b.mask).expect("shapes");
                b.enc.backward(s, &c, &b.w).expect("shapes");
            }),
        }
    }
}

pub fn check_temporal_encoder(seed: u64, h: f64) -> Vec<CheckOutcome> {
    vec![outcome(
        "temporal_encoder.params",
        TemporalCase::new(seed).problem().check(h),
    )]
}

pub fn check_composer(seed: u64, paradigm: QueryParadigm, h: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let composer = Composer::new(TOY_DIM);
    let mut store = ParamStore::new(seed);
    composer.register(&mut store).expect("fresh store");
    let f4 = uniform(&mut rng, TOY_LANES, TOY_DIM);
    let l = uniform(&mut rng, TOY_LANES, TOY_DIM);
    let w = uniform(&mut rng, TOY_LANES, TOY_DIM);
    let run = |s: &ParamStore, f4: &Tensor2D, l: &Tensor2D| {
        readout(&composer.compose(s, f4, l, paradigm).expect("shapes"), &w)
    };
    let params = grad_check_params(
        &store,
        |s| run(s, &f4, &l),
        |s| {
            composer.backward(s, &f4, &w, paradigm).expect("shapes");
        },
        h,
    );
    let mut s = store.clone();
    let (d_f4, d_l) = composer
        .backward(&mut s, &f4, &w, paradigm)
        .expect("shapes");
    let tag = match paradigm {
        QueryParadigm::InstanceBased => "instance",
        QueryParadigm::PointLevel => "point",
    };
    vec![
        outcome(format!("compose[{tag}].params"), params),
        outcome(
            format!("compose[{tag}].update"),
            input_check(&f4, &d_f4, h, |t| run(&store, t, &l)),
        ),
        outcome(
            format!("compose[{tag}].lane"),
            input_check(&l, &d_l, h, |t| run(&store, &f4, t)),
        ),
    ]
}

struct FuseCase {
    pipe: Pipe,
    paradigm: QueryParadigm,
    fuser: Fuser,
    composer: Composer,
    store: ParamStore,
    l: Tensor2D,
    t: Tensor2D,
    w: Tensor2D,
    mask: SpatialMask,
}

impl FuseCase {
    fn new(seed: u64, pipe: Pipe, paradigm: QueryParadigm) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fuser = Fuser::new(FusionConfig {
            pipe,
            depth: 1,
            normalize_coords: true,
            heads: TOY_HEADS,
            dim: TOY_DIM,
        })
        .expect("toy config is valid");
        let composer = Composer::new(TOY_DIM);
        let mut store = ParamStore::new(seed);
        fuser.register(&mut store, false).expect("fresh store");
        composer.register(&mut store).expect("fresh store");
        let l = uniform(&mut rng, TOY_LANES, TOY_DIM);
        let t = uniform(&mut rng, TOY_FLOW, TOY_DIM);
        let mask = build_spatial_mask(TOY_LANES, &[true, false, true], None).expect("sized");
        let w = uniform(&mut rng, TOY_LANES, TOY_DIM);
        FuseCase {
            pipe,
            paradigm,
            fuser,
            composer,
            store,
            l,
            t,
            w,
            mask,
        }
    }

    fn name(&self) -> String {
        format!("fuse[{}]", self.pipe)
    }

    fn run(&self, s: &ParamStore, l: &Tensor2D, t: &Tensor2D) -> f64 {
        let stages = self.fuser.fuse(s, l, t, &self.mask).expect("shapes");
        let out = self
            .composer
            .compose(s, stages.final_lane_update(), l, self.paradigm)
            .expect("shapes");
        readout(&out, &self.w)
    }

    fn grads(&self, s: &mut ParamStore) -> (Tensor2D, Tensor2D) {
        let (stages, cache) = self
            .fuser
            .forward(s, &self.l, &self.t, &self.mask)
            .expect("shapes");
        let f4 = stages.final_lane_update().clone();
        let (d_f4, d_direct) = self
            .composer
            .backward(s, &f4, &self.w, self.paradigm)
            .expect("shapes");
        let (mut d_l, d_t) = self.fuser.backward(s, &cache, &d_f4).expect("shapes");
        d_l.add_assign(&d_direct).expect("shapes");
        (d_l, d_t)
    }

    fn problem(self) -> ParamProblem {
        let store = self.store.clone();
        let name = format!("{}.params", self.name());
        let case = Rc::new(self);
        let (a, b) = (Rc::clone(&case), case);
        ParamProblem {
            name,
            store,
            loss: Box::new(move |s| a.run(s, &a.l, &a.t)),
            grads: Box::new(move |s| {
                b.grads(s);
            }),
        }
    }
}

/// Depth-1 fuse stack followed by composition, at the toy sizes.
pub fn check_fuse_stack(
    seed: u64,
    pipe: Pipe,
    paradigm: QueryParadigm,
    h: f64,
) -> Vec<CheckOutcome> {
    let case = FuseCase::new(seed, pipe, paradigm);
    let tag = case.name();
    let mut s = case.store.clone();
    let (d_l, d_t) = case.grads(&mut s);
    let store = &case.store;
    let lane = input_check(&case.l, &d_l, h, |x| case.run(store, x, &case.t));
    let flow = input_check(&case.t, &d_t, h, |x| case.run(store, &case.l, x));
    let params = case.problem().check(h);
    vec![
        outcome(format!("{tag}.params"), params),
        outcome(format!("{tag}.lane"), lane),
        outcome(format!("{tag}.flow"), flow),
    ]
}

/// Parameter-gradient problems for the composite layers.
pub fn param_problems(seed: u64) -> Vec<ParamProblem> {
    vec![
        BlockCase::new(seed).problem(),
        TemporalCase::new(seed).problem(),
        FuseCase::new(seed, Pipe::LtLl, QueryParadigm::PointLevel).problem(),
        FuseCase::new(seed, Pipe::All, QueryParadigm::InstanceBased).problem(),
    ]
}

/// Every per-layer check plus the default-pipe fuse stack.
pub fn run_all(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.extend(check_attention(seed, h));
    out.extend(check_gelu(seed, h));
    out.extend(check_linear(seed, h));
    out.extend(check_layer_norm(seed, h));
    out.extend(check_multi_head(seed, h));
    out.extend(check_masked_block(seed, h));
    out.extend(check_temporal_encoder(seed, h));
    out.extend(check_composer(seed, QueryParadigm::InstanceBased, h));
    out.extend(check_composer(seed, QueryParadigm::PointLevel, h));
    out.extend(check_fuse_stack(
        seed,
        Pipe::LtLl,
        QueryParadigm::PointLevel,
        h,
    ));
    out.extend(check_fuse_stack(
        seed,
        Pipe::All,
        QueryParadigm::PointLevel,
        h,
    ));
    out
}
