//! Scaled dot-product multi-head attention over pre-projected Q, K, V.
//!
//! Masked pairs receive an additive bias of [`MASK_BIAS`] before the softmax.
//! A query row whose mask row is entirely false produces a zero output row
//! and receives zero gradient.

use super::{BoolGrid, NeuralError, Tensor2D};

/// Additive pre-softmax bias for masked (query, key) pairs.
pub const MASK_BIAS: f64 = -1e9;

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    heads: usize,
    /// One `n_q x n_k` probability matrix per head. Inactive rows are zero.
    probs: Vec<Tensor2D>,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Tensor2D] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Tensor2D,
    pub dk: Tensor2D,
    pub dv: Tensor2D,
}

fn check_shapes(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &BoolGrid,
    heads: usize,
) -> Result<(), NeuralError> {
    let shape_err = |expected: String, got: String| NeuralError::Shape {
        op: "attention_forward",
        expected,
        got,
    };
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(shape_err(
            "model width divisible by heads".into(),
            format!("width {} with {heads} heads", q.cols()),
        ));
    }
    if k.cols() != q.cols() || v.cols() != q.cols() {
        return Err(shape_err(
            format!("K and V width {}", q.cols()),
            format!("K width {}, V width {}", k.cols(), v.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(shape_err(
            format!("V with {} rows", k.rows()),
            format!("{} rows", v.rows()),
        ));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(shape_err(
            format!("mask {}x{}", q.rows(), k.rows()),
            format!("mask {}x{}", mask.rows(), mask.cols()),
        ));
    }
    Ok(())
}

/// Per head `h`: `softmax(Q_h K_hᵀ / √d_h + bias) V_h`, heads concatenated
/// along the feature axis.
pub fn attention_forward(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &BoolGrid,
    heads: usize,
) -> Result<(Tensor2D, AttentionCache), NeuralError> {
    check_shapes(q, k, v, mask, heads)?;
    let (nq, nk) = (q.rows(), k.rows());
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2D::zeros(nq, q.cols());
    let mut probs = Vec::with_capacity(heads);

    for h in 0..heads {
        let c0 = h * dh;
        let mut p = Tensor2D::zeros(nq, nk);
        let mut logits = vec![0.0; nk];
        for i in 0..nq {
            if !mask.row_active(i) {
                continue;
            }
            let qi = &q.row(i)[c0..c0 + dh];
            for (j, logit) in logits.iter_mut().enumerate() {
                let kj = &k.row(j)[c0..c0 + dh];
                let bias = if mask.get(i, j) { 0.0 } else { MASK_BIAS };
                *logit = super::tensor::dot(qi, kj) * scale + bias;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = p.row_mut(i);
            for (pj, &l) in prow.iter_mut().zip(&logits) {
                *pj = (l - max).exp();
                sum += *pj;
            }
            for pj in prow.iter_mut() {
                *pj /= sum;
            }
            let orow = &mut out.row_mut(i)[c0..c0 + dh];
            for (j, &pij) in p.row(i).iter().enumerate() {
                if pij == 0.0 {
                    continue;
                }
                for (o, vj) in orow.iter_mut().zip(&v.row(j)[c0..c0 + dh]) {
                    *o += pij * vj;
                }
            }
        }
        probs.push(p);
    }

    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            heads,
            probs,
        },
    ))
}

/// Reverse-mode gradients of [`attention_forward`] given `d_out`.
pub fn attention_backward(
    cache: &AttentionCache,
    d_out: &Tensor2D,
) -> Result<AttentionGrads, NeuralError> {
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    q.same_shape(d_out, "attention_backward")?;
    let (nq, nk) = (q.rows(), k.rows());
    let dh = q.cols() / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor2D::zeros(nq, q.cols());
    let mut dk = Tensor2D::zeros(nk, k.cols());
    let mut dv = Tensor2D::zeros(nk, v.cols());
    let mut dp = vec![0.0; nk];

    for (h, p) in cache.probs.iter().enumerate() {
        let c0 = h * dh;
        for i in 0..nq {
            let prow = p.row(i);
            if prow.iter().all(|&x| x == 0.0) {
                continue;
            }
            let go = &d_out.row(i)[c0..c0 + dh];
            // dV_j += p_ij * dO_i ; dP_ij = dO_i · V_j
            for j in 0..nk {
                dp[j] = super::tensor::dot(go, &v.row(j)[c0..c0 + dh]);
                let pij = prow[j];
                if pij != 0.0 {
                    for (d, g) in dv.row_mut(j)[c0..c0 + dh].iter_mut().zip(go) {
                        *d += pij * g;
                    }
                }
            }
            let weighted: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[c0..c0 + dh];
                for (d, kv) in dq.row_mut(i)[c0..c0 + dh].iter_mut().zip(kj) {
                    *d += ds * kv;
                }
                let qi = &q.row(i)[c0..c0 + dh];
                for (d, qv) in dk.row_mut(j)[c0..c0 + dh].iter_mut().zip(qi) {
                    *d += ds * qv;
                }
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = t(&[vec![0.3, -1.2]]);
        let k = t(&[vec![2.0, 0.7]]);
        let v = t(&[vec![5.0, -3.0]]);
        let (out, _) = attention_forward(&q, &k, &v, &BoolGrid::new(1, 1, true), 1).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let q = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (out, cache) = attention_forward(&q, &q, &q, &BoolGrid::new(2, 2, false), 2).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        let g = attention_backward(&cache, &Tensor2D::filled(2, 2, 1.0)).unwrap();
        assert!(g.dq.data().iter().all(|&x| x == 0.0));
        assert!(g.dk.data().iter().all(|&x| x == 0.0));
        assert!(g.dv.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_by_two_matches_hand_softmax() {
        // Q=[[1,0],[0,1]], K=[[1,0],[1,1]], V=[[1,2],[3,4]], one head.
        // Row 0 logits (1/√2)[1, 1] -> p = [0.5, 0.5] -> [2, 3].
        // Row 1 logits (1/√2)[0, 1] -> p1 = 1/(1+e^{-1/√2}).
        let q = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = t(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let v = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (out, _) = attention_forward(&q, &k, &v, &BoolGrid::new(2, 2, true), 1).unwrap();
        // Frozen from an independent numpy evaluation.
        let expected = [2.0, 3.0, 2.339_523_098_653_313_8, 3.339_523_098_653_313_8];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_key_gets_no_gradient() {
        let q = t(&[vec![0.2, -0.4], vec![1.0, 0.5]]);
        let k = t(&[vec![0.3, 0.1], vec![-0.7, 0.9], vec![0.4, 0.4]]);
        let v = t(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]);
        let mask = BoolGrid::from_fn(2, 3, |_, j| j != 1);
        let (_, cache) = attention_forward(&q, &k, &v, &mask, 1).unwrap();
        let g = attention_backward(&cache, &Tensor2D::filled(2, 2, 1.0)).unwrap();
        assert!(g.dk.row(1).iter().all(|&x| x == 0.0));
        assert!(g.dv.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let q = Tensor2D::zeros(2, 4);
        let k = Tensor2D::zeros(3, 4);
        assert!(attention_forward(&q, &k, &k, &BoolGrid::new(2, 2, true), 2).is_err());
        assert!(attention_forward(&q, &k, &k, &BoolGrid::new(2, 3, true), 3).is_err());
    }
}
