//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to it. Parameters enter the tape by id, without copying. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar with
//! respect to every parameter that was touched.
//!
//! A graph built with [`Graph::inference`] keeps forward values only and
//! refuses to run backward; decoding uses this mode. Either mode can record
//! the shape of every forward matrix multiply, tagged with a caller-chosen
//! component label, for FLOPs accounting.

use crate::attention::{attention_backward, attention_forward, AttnLayout, AttnProbs};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One forward matrix multiply `[m×k]·[k×n]`, attributed to a component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulRecord {
    pub tag: &'static str,
    pub step: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulRecord {
    /// Multiply-accumulates doubled: `2·m·k·n`.
    pub fn flops(&self) -> u64 {
        2 * (self.m as u64) * (self.k as u64) * (self.n as u64)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    LogSoftmax(Var),
    WeightedSum(Var, Tensor),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        layout: AttnLayout,
        probs: AttnProbs,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Gradients indexed by [`ParamId`]; `None` for untouched parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Adds these gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.iter() {
            store.get_mut(id).grad.add_assign(g);
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    record: bool,
    trace: Option<Vec<MatmulRecord>>,
    tag: &'static str,
    step: usize,
}

impl<'p> Graph<'p> {
    /// A recording graph that supports [`Graph::backward`].
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            record: true,
            trace: None,
            tag: "untagged",
            step: 0,
        }
    }

    /// A forward-only graph.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Starts recording matmul shapes.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<MatmulRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Sets the component label attached to subsequent matmul records.
    pub fn set_tag(&mut self, tag: &'static str) {
        self.tag = tag;
    }

    pub fn tag(&self) -> &'static str {
        self.tag
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    fn note_matmul(&mut self, m: usize, k: usize, n: usize) {
        if let Some(t) = self.trace.as_mut() {
            t.push(MatmulRecord {
                tag: self.tag,
                step: self.step,
                m,
                k,
                n,
            });
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul: [{m}x{k}]·[{}x{n}]", bv.rows());
        let mut out = vec![0.0; m * n];
        matmul(av.data(), bv.data(), &mut out, m, k, n);
        self.note_matmul(m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_bt: inner dimension");
        let mut out = vec![0.0; m * n];
        matmul_bt(av.data(), bv.data(), &mut out, m, k, n);
        self.note_matmul(m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b))
    }

    /// `x·W + b` with `W` stored `[d_in × d_out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        assert_eq!(rv.numel(), c, "add_row: width mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (r[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(rows, c, out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Stacks the listed rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols: row mismatch");
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (p + q));
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(av.rows(), p + q, data);
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let lse = logsumexp(r);
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.numel(), w.numel(), "weighted_sum: size mismatch");
        let s = av.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(a, w))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Multi-head attention; see [`crate::attention`]. Records the two
    /// attention matmuls per block at their dense shapes.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttnLayout,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            &layout,
            bias.map(|b| self.value(b)),
        )?;
        let d = self.value(q).cols();
        for b in &layout.blocks {
            self.note_matmul(b.q_len, d, b.k_len);
            self.note_matmul(b.q_len, b.k_len, d);
        }
        let op = if self.record {
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                layout,
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op))
    }

    /// Reverse pass from a scalar. Panics on a forward-only graph.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            grads: (0..self.store.len()).map(|_| None).collect(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    matmul_bt(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(av.data(), g.data(), &mut db, m, k, n);
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![0.0; m * k];
                    matmul(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(g.data(), av.data(), &mut db, m, n, k);
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let rv = self.value(*row);
                    let mut gr = vec![0.0; rv.numel()];
                    for i in 0..g.rows() {
                        for (s, v) in gr.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *row, Tensor::new(rv.shape().to_vec(), gr));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (rows, c) = (g.rows(), g.cols());
                    let mut dx = vec![0.0; rows * c];
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dg[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    acc(&mut grads, *x, Tensor::matrix(rows, c, dx));
                    acc(&mut grads, *gamma, Tensor::new(gshape.clone(), dg));
                    acc(&mut grads, *beta, Tensor::new(gshape, dbeta));
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (p, q) = (av.cols(), bv.cols());
                    let mut ga = Vec::with_capacity(av.numel());
                    let mut gb = Vec::with_capacity(bv.numel());
                    for i in 0..g.rows() {
                        let r = g.row(i);
                        ga.extend_from_slice(&r[..p]);
                        gb.extend_from_slice(&r[p..p + q]);
                    }
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.numel();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), part));
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("log_softmax value");
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        for (o, &yv) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o -= yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, w) => {
                    let mut ga = w.clone();
                    ga.scale_assign(g.item());
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::new(shape, ga.into_data()));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    heads,
                    layout,
                    probs,
                } => {
                    let bias_shape = bias.map(|b| self.value(b).shape().to_vec());
                    let ag = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        layout,
                        bias_shape.as_deref(),
                        probs,
                        &g,
                    );
                    acc(&mut grads, *q, ag.dq);
                    acc(&mut grads, *k, ag.dk);
                    acc(&mut grads, *v, ag.dv);
                    if let (Some(b), Some(db)) = (bias, ag.dbias) {
                        acc(&mut grads, *b, db);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

pub fn gelu(x: f64) -> f64 {
    // 0.5·(1 + tanh u) = σ(2u); exp is much cheaper than tanh in libm.
    x / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp());
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
