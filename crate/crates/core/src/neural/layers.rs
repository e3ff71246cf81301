//! Layers with explicit forward and backward passes.
//!
//! A layer is a lightweight descriptor holding parameter names; values and
//! gradients live in a [`ParamStore`]. Forward passes borrow the store
//! immutably, backward passes accumulate into its gradient slots.

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::{BoolGrid, Init, NeuralError, ParamStore, Tensor2D};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b`, `W` is `in x out`, `b` is `1 x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn register(&self, store: &mut ParamStore, weight_init: Init) -> Result<(), NeuralError> {
        store.register(&self.weight, self.in_dim, self.out_dim, weight_init)?;
        store.register(&self.bias, 1, self.out_dim, Init::Zeros)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2D) -> Result<Tensor2D, NeuralError> {
        let mut y = x.matmul(store.get(&self.weight)?)?;
        y.add_row_broadcast(store.get(&self.bias)?)?;
        Ok(y)
    }

    /// Accumulates `dW = xᵀ dy`, `db = Σ dy` and returns `dx = dy Wᵀ`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Tensor2D,
        dy: &Tensor2D,
    ) -> Result<Tensor2D, NeuralError> {
        let dx = dy.matmul_t(store.get(&self.weight)?)?;
        store.accumulate(&self.weight, &x.t_matmul(dy)?)?;
        store.accumulate(&self.bias, &dy.sum_rows())?;
        Ok(dx)
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<(), NeuralError> {
        store.register(&self.gamma, 1, self.dim, Init::Ones)?;
        store.register(&self.beta, 1, self.dim, Init::Zeros)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2D,
    ) -> Result<(Tensor2D, LayerNormCache), NeuralError> {
        let gamma = store.get(&self.gamma)?;
        let beta = store.get(&self.beta)?;
        if x.cols() != self.dim {
            return Err(NeuralError::Shape {
                op: "layer_norm",
                expected: format!("width {}", self.dim),
                got: format!("width {}", x.cols()),
            });
        }
        let d = self.dim as f64;
        let mut xhat = Tensor2D::zeros(x.rows(), x.cols());
        let mut y = Tensor2D::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..x.cols() {
                let h = (row[c] - mean) * is;
                xhat[(r, c)] = h;
                y[(r, c)] = h * gamma[(0, c)] + beta[(0, c)];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2D,
    ) -> Result<Tensor2D, NeuralError> {
        let gamma = store.get(&self.gamma)?.clone();
        let xhat = &cache.xhat;
        xhat.same_shape(dy, "layer_norm_backward")?;
        let d = self.dim as f64;
        let mut dgamma = Tensor2D::zeros(1, self.dim);
        let mut dx = Tensor2D::zeros(dy.rows(), dy.cols());
        let mut dxhat = vec![0.0; self.dim];
        for r in 0..dy.rows() {
            let mut sum = 0.0;
            let mut sum_xh = 0.0;
            for c in 0..self.dim {
                let g = dy[(r, c)];
                dgamma[(0, c)] += g * xhat[(r, c)];
                dxhat[c] = g * gamma[(0, c)];
                sum += dxhat[c];
                sum_xh += dxhat[c] * xhat[(r, c)];
            }
            let k = cache.inv_std[r] / d;
            for c in 0..self.dim {
                dx[(r, c)] = k * (d * dxhat[c] - sum - xhat[(r, c)] * sum_xh);
            }
        }
        store.accumulate(&self.gamma, &dgamma)?;
        store.accumulate(&self.beta, &dy.sum_rows())?;
        Ok(dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multi-head attention with learned Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    xq: Tensor2D,
    xkv: Tensor2D,
    attn: AttentionCache,
    ctx: Tensor2D,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(&format!("{name}.q"), dim, dim),
            k: Linear::new(&format!("{name}.k"), dim, dim),
            v: Linear::new(&format!("{name}.v"), dim, dim),
            o: Linear::new(&format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn output_projection(&self) -> &Linear {
        &self.o
    }

    pub fn register(&self, store: &mut ParamStore, zero_output: bool) -> Result<(), NeuralError> {
        self.q.register(store, Init::XavierUniform)?;
        self.k.register(store, Init::XavierUniform)?;
        self.v.register(store, Init::XavierUniform)?;
        let o_init = if zero_output {
            Init::Zeros
        } else {
            Init::XavierUniform
        };
        self.o.register(store, o_init)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        xq: &Tensor2D,
        xkv: &Tensor2D,
        mask: &BoolGrid,
    ) -> Result<(Tensor2D, MhaCache), NeuralError> {
        let q = self.q.forward(store, xq)?;
        let k = self.k.forward(store, xkv)?;
        let v = self.v.forward(store, xkv)?;
        let (ctx, attn) = attention_forward(&q, &k, &v, mask, self.heads)?;
        let out = self.o.forward(store, &ctx)?;
        Ok((
            out,
            MhaCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                attn,
                ctx,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MhaCache,
        dout: &Tensor2D,
    ) -> Result<(Tensor2D, Tensor2D), NeuralError> {
        let dctx = self.o.backward(store, &cache.ctx, dout)?;
        let g = attention_backward(&cache.attn, &dctx)?;
        let dxq = self.q.backward(store, &cache.xq, &g.dq)?;
        let mut dxkv = self.k.backward(store, &cache.xkv, &g.dk)?;
        dxkv.add_assign(&self.v.backward(store, &cache.xkv, &g.dv)?)?;
        Ok((dxq, dxkv))
    }
}

/// Pre-normalized residual block: masked attention then feed-forward.
///
/// ```text
/// h = x_q + MHA(LN_q(x_q), LN_kv(x_kv); mask)
/// y = h + FF2(gelu(FF1(LN_ff(h))))
/// ```
///
/// Query rows whose mask row is all false are copied through unchanged.
#[derive(Debug, Clone)]
pub struct MaskedBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct MaskedBlockCache {
    active: Vec<bool>,
    ln_q: LayerNormCache,
    ln_kv: LayerNormCache,
    attn: MhaCache,
    ln_ff: LayerNormCache,
    normed_h: Tensor2D,
    pre_act: Tensor2D,
    act: Tensor2D,
}

impl MaskedBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(&format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(&format!("{name}.ln_kv"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln_ff: LayerNorm::new(&format!("{name}.ln_ff"), dim),
            ff1: Linear::new(&format!("{name}.ff1"), dim, ffn_dim),
            ff2: Linear::new(&format!("{name}.ff2"), ffn_dim, dim),
            dim,
        }
    }

    /// With `zero_output`, the attention output projection and the second
    /// feed-forward layer start at zero so the block is an exact identity.
    pub fn register(&self, store: &mut ParamStore, zero_output: bool) -> Result<(), NeuralError> {
        self.ln_q.register(store)?;
        self.ln_kv.register(store)?;
        self.attn.register(store, zero_output)?;
        self.ln_ff.register(store)?;
        self.ff1.register(store, Init::XavierUniform)?;
        let init = if zero_output {
            Init::Zeros
        } else {
            Init::XavierUniform
        };
        self.ff2.register(store, init)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        xq: &Tensor2D,
        xkv: &Tensor2D,
        mask: &BoolGrid,
    ) -> Result<(Tensor2D, MaskedBlockCache), NeuralError> {
        if xq.cols() != self.dim || xkv.cols() != self.dim {
            return Err(NeuralError::Shape {
                op: "masked_block",
                expected: format!("width {}", self.dim),
                got: format!("query width {}, key width {}", xq.cols(), xkv.cols()),
            });
        }
        let active: Vec<bool> = (0..xq.rows()).map(|r| mask.row_active(r)).collect();
        let (a, ln_q) = self.ln_q.forward(store, xq)?;
        let (c, ln_kv) = self.ln_kv.forward(store, xkv)?;
        let (att, attn) = self.attn.forward(store, &a, &c, mask)?;
        let mut h = xq.clone();
        for (r, &on) in active.iter().enumerate() {
            if on {
                for (hv, av) in h.row_mut(r).iter_mut().zip(att.row(r)) {
                    *hv += av;
                }
            }
        }
        let (normed_h, ln_ff) = self.ln_ff.forward(store, &h)?;
        let pre_act = self.ff1.forward(store, &normed_h)?;
        let act = pre_act.map(gelu);
        let f = self.ff2.forward(store, &act)?;
        let mut y = h;
        for (r, &on) in active.iter().enumerate() {
            if on {
                for (yv, fv) in y.row_mut(r).iter_mut().zip(f.row(r)) {
                    *yv += fv;
                }
            }
        }
        Ok((
            y,
            MaskedBlockCache {
                active,
                ln_q,
                ln_kv,
                attn,
                ln_ff,
                normed_h,
                pre_act,
                act,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MaskedBlockCache,
        dy: &Tensor2D,
    ) -> Result<(Tensor2D, Tensor2D), NeuralError> {
        let gated = |t: &Tensor2D| {
            let mut g = t.clone();
            for (r, &on) in cache.active.iter().enumerate() {
                if !on {
                    g.row_mut(r).fill(0.0);
                }
            }
            g
        };
        let df = gated(dy);
        let dact = self.ff2.backward(store, &cache.act, &df)?;
        let mut dpre = dact;
        for (d, &u) in dpre.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *d *= gelu_grad(u);
        }
        let dnormed = self.ff1.backward(store, &cache.normed_h, &dpre)?;
        let mut dh = dy.clone();
        dh.add_assign(&self.ln_ff.backward(store, &cache.ln_ff, &dnormed)?)?;
        let datt = gated(&dh);
        let (da, dc) = self.attn.backward(store, &cache.attn, &datt)?;
        let mut dxq = dh;
        dxq.add_assign(&self.ln_q.backward(store, &cache.ln_q, &da)?)?;
        let dxkv = self.ln_kv.backward(store, &cache.ln_kv, &dc)?;
        Ok((dxq, dxkv))
    }
}
