//! Define-by-run computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::par;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Learnable leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return shape_err(format!("matmul {:?} by {:?}", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return shape_err(format!("add_row {:?} + {:?}", tx.shape(), tr.shape()));
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Repeats each row `times` times consecutively: `[B, n] -> [B * times, n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return shape_err("repeat_rows by zero".into());
        }
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * times * n);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::matrix(rows * times, n, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::RepeatRows(x, times), ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of nothing".into());
        };
        let rows = self.value(first).rows();
        if xs.iter().any(|&v| self.value(v).rows() != rows) {
            return shape_err("concat_cols row counts differ".into());
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let ng = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_empty() {
            return shape_err("mse of empty tensors".into());
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mse(a, b), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err(format!("layer_norm width {n}"));
        }
        let tx = self.value(x);
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `[B * seq, d]`: `B` independent sequences of `seq`
    /// tokens stacked row-wise. Attention never crosses sequence boundaries.
    /// Heads split the `d` columns into `heads` contiguous groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("model width {d} not divisible by {heads} heads"));
        }
        if seq == 0 || rows % seq != 0 {
            return shape_err(format!("{rows} rows is not a multiple of sequence length {seq}"));
        }
        let batches = rows / seq;
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blocks = par::map_indexed(batches, |b| {
            let off = b * seq * d;
            let span = seq * d;
            attention_forward(&tq[off..off + span], &tk[off..off + span], &tv[off..off + span], seq, d, heads)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batches * heads * seq * seq);
        for (o, p) in blocks {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let out = Tensor::matrix(rows, d, out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, seq, probs }, ng))
    }

    /// Softmax weights recorded by an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Backpropagates from a single-element `loss` and adds every parameter
    /// gradient into `store`. Calling twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.grad_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, kk, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * kk];
                        // g [m,n] @ b^T [n,k]
                        gemm(m, n, kk, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut da, false);
                        self.accumulate(&mut grads, *a, Tensor::matrix(m, kk, da)?);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; kk * n];
                        // a^T [k,m] @ g [m,n]
                        gemm(kk, m, n, ta.data(), (1, kk as isize), g.data(), (n as isize, 1), &mut db, false);
                        self.accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = zip_map(g.data(), tb.data(), |x, y| x * y);
                        self.accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                    }
                    if self.needs(*b) {
                        let d = zip_map(g.data(), ta.data(), |x, y| x * y);
                        self.accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let n = g.cols();
                        let mut d = vec![0.0; n];
                        for chunk in g.data().chunks(n) {
                            for (acc, v) in d.iter_mut().zip(chunk) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        self.accumulate(&mut grads, *row, Tensor::new(shape, d)?);
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::RepeatRows(x, times) => {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let mut d = vec![0.0; tx.len()];
                    for (r, chunk) in g.data().chunks(n).enumerate() {
                        let dst = &mut d[(r / times) * n..(r / times + 1) * n];
                        for (acc, v) in dst.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
                Op::ConcatCols(xs) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &v in xs {
                        let tv = self.value(v);
                        let w = tv.cols();
                        if self.needs(v) {
                            let mut d = Vec::with_capacity(tv.len());
                            for row in g.data().chunks(total) {
                                d.extend_from_slice(&row[offset..offset + w]);
                            }
                            self.accumulate(&mut grads, v, Tensor::new(tv.shape().to_vec(), d)?);
                        }
                        offset += w;
                    }
                }
                Op::Sigmoid(x) => {
                    let d = zip_map(g.data(), node.value.data(), |gv, s| gv * s * (1.0 - s));
                    self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Tanh(x) => {
                    let d = zip_map(g.data(), node.value.data(), |gv, t| gv * (1.0 - t * t));
                    self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Relu(x) => {
                    let d = zip_map(g.data(), self.value(*x).data(), |gv, v| if v > 0.0 { gv } else { 0.0 });
                    self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Gelu(x) => {
                    let d = zip_map(g.data(), self.value(*x).data(), |gv, v| gv * gelu_grad(v));
                    self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Scale(x, f) => {
                    let d = g.data().iter().map(|v| v * f).collect();
                    self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sum(x) => {
                    let t = Tensor::full(self.value(*x).shape(), g.item());
                    self.accumulate(&mut grads, *x, t);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = 2.0 * g.item() / ta.len() as f64;
                    let d: Vec<f64> = zip_map(ta.data(), tb.data(), |x, y| scale * (x - y));
                    if self.needs(*b) {
                        let neg = d.iter().map(|v| -v).collect();
                        self.accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), neg)?);
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = g.cols();
                    let gam = self.value(*gamma).data();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for (grow, xrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                dg[c] += grow[c] * xrow[c];
                                db[c] += grow[c];
                            }
                        }
                        let gs = self.value(*gamma).shape().to_vec();
                        let bs = self.value(*beta).shape().to_vec();
                        self.accumulate(&mut grads, *gamma, Tensor::new(gs, dg)?);
                        self.accumulate(&mut grads, *beta, Tensor::new(bs, db)?);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; g.len()];
                        let mut dxhat = vec![0.0; n];
                        for (r, (grow, xrow)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in 0..n {
                                dxhat[c] = grow[c] * gam[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * xrow[c];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for c in 0..n {
                                dx[r * n + c] = rstd[r] * (dxhat[c] - m1 - xrow[c] * m2);
                            }
                        }
                        self.accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                    }
                }
                Op::Attention { q, k, v, heads, seq, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = (tq.rows(), tq.cols());
                    let (seq, heads) = (*seq, *heads);
                    let span = seq * d;
                    let pspan = heads * seq * seq;
                    let blocks = par::map_indexed(rows / seq, |b| {
                        let off = b * span;
                        attention_backward(
                            &g.data()[off..off + span],
                            &tq.data()[off..off + span],
                            &tk.data()[off..off + span],
                            &tv.data()[off..off + span],
                            &probs[b * pspan..(b + 1) * pspan],
                            seq,
                            d,
                            heads,
                        )
                    });
                    let mut dq = Vec::with_capacity(rows * d);
                    let mut dk = Vec::with_capacity(rows * d);
                    let mut dv = Vec::with_capacity(rows * d);
                    for (a, b, c) in blocks {
                        dq.extend_from_slice(&a);
                        dk.extend_from_slice(&b);
                        dv.extend_from_slice(&c);
                    }
                    self.accumulate(&mut grads, *q, Tensor::matrix(rows, d, dq)?);
                    self.accumulate(&mut grads, *k, Tensor::matrix(rows, d, dk)?);
                    self.accumulate(&mut grads, *v, Tensor::matrix(rows, d, dv)?);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// One sequence, all heads. Returns (output `[seq, d]`, probs `[heads, seq, seq]`).
fn attention_forward(q: &[f64], k: &[f64], v: &[f64], seq: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; seq * d];
    let mut probs = vec![0.0; heads * seq * seq];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..seq {
            let p = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..seq {
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                total += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= total;
            }
            let oi = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..seq {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += p[j] * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; seq * d];
    let mut dk = vec![0.0; seq * d];
    let mut dv = vec![0.0; seq * d];
    let mut dp = vec![0.0; seq];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..seq {
            let p = &probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let gi = &g[i * d + c0..i * d + c0 + dh];
            let mut dot = 0.0;
            for j in 0..seq {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for (acc, gv) in dvj.iter_mut().zip(gi) {
                    *acc += p[j] * gv;
                }
            }
            for j in 0..seq {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + c0 + c] += ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] += ds * q[i * d + c0 + c];
                }
            }
        }
    }
    (dq, dk, dv)
}
