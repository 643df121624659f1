//! Scaled dot-product attention over packed rows.
//!
//! Queries and keys of several independent sequences live in the same
//! matrices; an [`AttnLayout`] says which query rows may look at which key
//! rows. Masked keys are skipped entirely (they get exactly zero weight and
//! do not enter the softmax sums), so padding a key block never changes the
//! result for real rows.

use crate::error::{Result, SubstrateError};
use crate::tensor::{dot, Tensor};

/// One query range attending to one key range.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Row-major `q_len × k_len`; `None` allows every key.
    pub mask: Option<Vec<bool>>,
    /// Row-major `q_len × k_len` column indices into the per-head bias table.
    pub relation: Option<Vec<u32>>,
}

impl AttnBlock {
    pub fn dense(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            k_start,
            k_len,
            mask: None,
            relation: None,
        }
    }

    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i * self.k_len + j])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnLayout {
    pub blocks: Vec<AttnBlock>,
}

impl AttnLayout {
    pub fn single(block: AttnBlock) -> Self {
        Self {
            blocks: vec![block],
        }
    }
}

/// Per-block attention probabilities kept for the backward pass,
/// `heads × q_len × k_len` each.
pub type AttnProbs = Vec<Vec<f64>>;

/// Multi-head attention. `q` is `[Rq × d]`, `k` and `v` are `[Rk × d]`,
/// `bias` (if any) is `[heads × n_relations]`. Query rows not covered by any
/// block produce zeros.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    bias: Option<&Tensor>,
) -> Result<(Tensor, AttnProbs)> {
    let d = q.cols();
    assert_eq!(k.cols(), d, "attention: key width");
    assert_eq!(v.cols(), d, "attention: value width");
    assert_eq!(k.rows(), v.rows(), "attention: key/value rows");
    assert!(heads > 0 && d % heads == 0, "attention: d={d} not divisible by heads={heads}");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let mut all_probs = Vec::with_capacity(layout.blocks.len());

    for b in &layout.blocks {
        assert!(b.q_start + b.q_len <= q.rows(), "attention: query block out of range");
        assert!(b.k_start + b.k_len <= k.rows(), "attention: key block out of range");
        if let Some(m) = &b.mask {
            assert_eq!(m.len(), b.q_len * b.k_len, "attention: mask shape");
        }
        if let Some(r) = &b.relation {
            assert_eq!(r.len(), b.q_len * b.k_len, "attention: relation shape");
            assert!(bias.is_some(), "attention: relation without bias table");
        }
        for i in 0..b.q_len {
            if !(0..b.k_len).any(|j| b.allowed(i, j)) {
                return Err(SubstrateError::EmptyAttentionRow {
                    query: b.q_start + i,
                });
            }
        }
        let mut probs = vec![0.0; heads * b.q_len * b.k_len];
        let mut logits = vec![0.0; b.k_len];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let bias_row = bias.map(|t| t.row(h));
            for i in 0..b.q_len {
                let qi = &q.row(b.q_start + i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..b.k_len {
                    if !b.allowed(i, j) {
                        continue;
                    }
                    let mut l = dot(qi, &k.row(b.k_start + j)[cols.clone()]) * scale;
                    if let (Some(rel), Some(br)) = (&b.relation, bias_row) {
                        l += br[rel[i * b.k_len + j] as usize];
                    }
                    logits[j] = l;
                    max = max.max(l);
                }
                let p = &mut probs[(h * b.q_len + i) * b.k_len..(h * b.q_len + i + 1) * b.k_len];
                let mut sum = 0.0;
                for j in 0..b.k_len {
                    if b.allowed(i, j) {
                        let e = (logits[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out.row_mut(b.q_start + i)[cols.clone()];
                for j in 0..b.k_len {
                    if b.allowed(i, j) {
                        p[j] /= sum;
                        let vj = &v.row(b.k_start + j)[cols.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p[j] * vv;
                        }
                    }
                }
            }
        }
        all_probs.push(probs);
    }
    Ok((out, all_probs))
}

pub struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub dbias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    bias_shape: Option<&[usize]>,
    probs: &AttnProbs,
    dout: &Tensor,
) -> AttnGrads {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dbias = bias_shape.map(Tensor::zeros);
    let mut dp = Vec::new();

    for (b, bp) in layout.blocks.iter().zip(probs) {
        dp.resize(b.k_len, 0.0);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..b.q_len {
                let p = &bp[(h * b.q_len + i) * b.k_len..(h * b.q_len + i + 1) * b.k_len];
                let go = &dout.row(b.q_start + i)[cols.clone()];
                let mut inner = 0.0;
                for j in 0..b.k_len {
                    if !b.allowed(i, j) {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(go, &v.row(b.k_start + j)[cols.clone()]);
                    inner += p[j] * dp[j];
                    let dvj = &mut dv.row_mut(b.k_start + j)[cols.clone()];
                    for (dvv, &g) in dvj.iter_mut().zip(go) {
                        *dvv += p[j] * g;
                    }
                }
                for j in 0..b.k_len {
                    if !b.allowed(i, j) {
                        continue;
                    }
                    let dl = p[j] * (dp[j] - inner);
                    if let (Some(rel), Some(db)) = (&b.relation, dbias.as_mut()) {
                        db.row_mut(h)[rel[i * b.k_len + j] as usize] += dl;
                    }
                    let ds = dl * scale;
                    let kj = &k.row(b.k_start + j)[cols.clone()];
                    for (x, kv) in dq.row_mut(b.q_start + i)[cols.clone()].iter_mut().zip(kj) {
                        *x += ds * kv;
                    }
                    let qi = &q.row(b.q_start + i)[cols.clone()];
                    for (x, qv) in dk.row_mut(b.k_start + j)[cols.clone()].iter_mut().zip(qi) {
                        *x += ds * qv;
                    }
                }
            }
        }
    }
    AttnGrads { dq, dk, dv, dbias }
}

/// Single-head attention with an explicit boolean mask and an optional dense
/// additive bias, both `n_q × n_k` row-major.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
    rel_bias: Option<&[f64]>,
) -> Result<Tensor> {
    let (nq, nk) = (q.rows(), k.rows());
    let block = AttnBlock {
        q_start: 0,
        q_len: nq,
        k_start: 0,
        k_len: nk,
        mask: Some(mask.to_vec()),
        relation: rel_bias.map(|_| (0..(nq * nk) as u32).collect()),
    };
    let bias = rel_bias.map(|b| Tensor::row_vector(b.to_vec()));
    let (out, _) = attention_forward(q, k, v, 1, &AttnLayout::single(block), bias.as_ref())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -4.0]);
        let k = Tensor::matrix(1, 2, vec![7.0, 1.0]);
        let v = Tensor::matrix(1, 2, vec![1.5, -2.5]);
        let out = scaled_dot_attention(&q, &k, &v, &[true], None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn symmetric_logits_average_values() {
        let q = Tensor::matrix(1, 2, vec![1.0, 1.0]);
        let k = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]);
        let out = scaled_dot_attention(&q, &k, &v, &[true, true], Some(&[0.0, 0.0])).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!((out.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn two_key_softmax_value() {
        // softmax(2, 0)[0] = e²/(e²+1), evaluated independently at high precision.
        let expected = 0.880_797_077_977_882_3;
        let q = Tensor::matrix(1, 1, vec![2.0]);
        let k = Tensor::matrix(2, 1, vec![1.0, 0.0]);
        let v = Tensor::matrix(2, 1, vec![1.0, 0.0]);
        let out = scaled_dot_attention(&q, &k, &v, &[true, true], None).unwrap();
        assert!((out.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let q = Tensor::matrix(2, 1, vec![1.0, -1.0]);
        let k = Tensor::matrix(2, 1, vec![1.0, 3.0]);
        let v = Tensor::matrix(2, 1, vec![10.0, 1e6]);
        let out = scaled_dot_attention(&q, &k, &v, &[true, false, false, true], None).unwrap();
        assert_eq!(out.data(), &[10.0, 1e6]);
    }

    #[test]
    fn empty_row_is_an_error() {
        let q = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        let k = Tensor::matrix(1, 1, vec![1.0]);
        let err = scaled_dot_attention(&q, &k, &k, &[true, false], None).unwrap_err();
        assert!(err.to_string().contains("empty attention row"));
    }

    #[test]
    fn padding_keys_do_not_change_bits() {
        let q = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.3, 0.4]);
        let k = Tensor::matrix(2, 4, vec![0.5, -0.1, 0.2, 0.3, -0.7, 0.1, 0.9, 0.0]);
        let v = Tensor::matrix(2, 4, (0..8).map(|x| x as f64 * 0.1).collect());
        let mut kp = k.data().to_vec();
        kp.extend([9.0; 4]);
        let mut vp = v.data().to_vec();
        vp.extend([-9.0; 4]);
        let kp = Tensor::matrix(3, 4, kp);
        let vp = Tensor::matrix(3, 4, vp);
        let a = attention_forward(&q, &k, &v, 2, &AttnLayout::single(AttnBlock::dense(0, 1, 0, 2)), None)
            .unwrap()
            .0;
        let mut blk = AttnBlock::dense(0, 1, 0, 3);
        blk.mask = Some(vec![true, true, false]);
        let b = attention_forward(&q, &kp, &vp, 2, &AttnLayout::single(blk), None).unwrap().0;
        assert_eq!(a, b);
    }
}
