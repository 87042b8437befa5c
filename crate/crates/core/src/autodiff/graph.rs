//! Tape-recorded tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already a topological order and the
//! backward sweep is a single reverse scan. A node only records how to
//! differentiate itself when at least one input requires a gradient; frozen
//! parameters and constants therefore cost nothing on the way back.

use std::sync::Arc;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive attention bias standing in for minus infinity.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax { x: Var, probs: Vec<T> },
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    WithClassToken { tokens: Var, cls: Var, batch: usize, seq: usize },
    Attention { qkv: Var, probs: Vec<T>, batch: usize, seq: usize, heads: usize },
    EfficiencyNormalize { phi: Var, batch: usize, players: usize },
}

pub(crate) struct Node<T> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients for trainable inputs.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    /// A graph that never records gradients (evaluation only).
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        let op = if requires_grad { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A free input leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// A parameter leaf; differentiable only when the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let requires_grad = self.recording && store.is_trainable(id);
        self.nodes.push(Node { value: store.shared(id), op: Op::Leaf { param: Some(id) }, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[.., n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// `a[R, n] + tile[P, n]` where row `r` receives `tile[r % P]`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (r, n) = dims2("add_tiled", self.value(a))?;
        let (p, n2) = dims2("add_tiled", self.value(tile))?;
        if n != n2 || p == 0 || r % p != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("{:?} + tiled {:?}", self.shape(a), self.shape(tile)),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        let td = self.value(tile).data();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let t = &td[(i % p) * n..(i % p + 1) * n];
            for (o, &b) in row.iter_mut().zip(t) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, tile]);
        Ok(self.push(Tensor::new(vec![r, n], out)?, Op::AddTiled(a, tile), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64_lossy(c);
        let out = self.value(a).map(|v| v * ct);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_fwd);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gamma {:?}, beta {:?}", tx.shape(), self.shape(gamma), self.shape(beta)),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, v) in row.iter().enumerate() {
                let xh = T::from_f64_lossy((v.as_f64() - mean) * istd);
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.cols()))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis, stabilized by log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        let mut probs = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            for v in row {
                let l = v.as_f64() - lse;
                out.push(T::from_f64_lossy(l));
                probs.push(T::from_f64_lossy(l.exp()));
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax { x: a, probs }, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::contract("log of a non-positive value"));
        }
        let out = t.map(|v| v.ln());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Square(a), rg))
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[a.0].value).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let n = dims2("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} and {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gather rows (indices may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, n) = dims2("select_rows", self.value(x))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", format!("row {bad} out of {r}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            data.extend_from_slice(src.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![rows.len(), n], data)?, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    /// Replace entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::shape("masked_fill", format!("mask of {} for {:?}", mask.len(), t.shape())));
        }
        let fill = T::from_f64_lossy(value);
        let data = t.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    /// Interleave a shared class-token row in front of each sample's tokens:
    /// `[batch·seq, h]` tokens and `[h]` class row give `[batch·(seq+1), h]`.
    pub fn with_class_token(&mut self, tokens: Var, cls: Var, batch: usize, seq: usize) -> Result<Var> {
        let (r, h) = dims2("with_class_token", self.value(tokens))?;
        if r != batch * seq || self.value(cls).shape() != [h] {
            return Err(Error::shape(
                "with_class_token",
                format!("tokens {:?}, class {:?}, batch {batch}, seq {seq}", self.shape(tokens), self.shape(cls)),
            ));
        }
        let tk = self.value(tokens).data();
        let cl = self.value(cls).data();
        let mut data = Vec::with_capacity(batch * (seq + 1) * h);
        for b in 0..batch {
            data.extend_from_slice(cl);
            data.extend_from_slice(&tk[b * seq * h..(b + 1) * seq * h]);
        }
        let out = Tensor::new(vec![batch * (seq + 1), h], data)?;
        let rg = self.any_grad(&[tokens, cls]);
        Ok(self.push(out, Op::WithClassToken { tokens, cls, batch, seq }, rg))
    }

    /// Multi-head self-attention core on packed `[Q | K | V]` projections.
    ///
    /// `qkv` is `[batch·seq, 3h]`; head `j` reads columns `j·h'..(j+1)·h'` of
    /// each third. `keep[b·seq + t]` false removes token `t` of sample `b` as a
    /// key: its score gets [`MASK_NEG`] added before the softmax, so its
    /// attention weight underflows to exactly zero. Masked tokens still act
    /// as queries. Returns the concatenated head outputs `[batch·seq, h]`.
    pub fn attention(&mut self, qkv: Var, keep: Option<&[bool]>, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, c3) = dims2("attention", self.value(qkv))?;
        if r != batch * seq || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?}, batch {batch}, seq {seq}, heads {heads}", self.shape(qkv)),
            ));
        }
        if let Some(k) = keep {
            if k.len() != batch * seq {
                return Err(Error::shape("attention", format!("key mask of {} for {} tokens", k.len(), batch * seq)));
            }
        }
        let h = c3 / 3;
        let hd = h / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * h];
        let mut scores = vec![T::zero(); seq * seq];
        let mut head_out = vec![T::zero(); seq * hd];
        let mut row64 = vec![0.0f64; seq];
        for b in 0..batch {
            let base = b * seq * c3;
            for j in 0..heads {
                let q = &src[base + j * hd..];
                let k = &src[base + h + j * hd..];
                let v = &src[base + 2 * h + j * hd..];
                T::gemm_strided(seq, hd, seq, q, (c3, 1), k, (1, c3), &mut scores, false);
                let p = &mut probs[(b * heads + j) * seq * seq..(b * heads + j + 1) * seq * seq];
                for t in 0..seq {
                    let srow = &scores[t * seq..(t + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (u, s) in srow.iter().enumerate() {
                        let masked = keep.is_some_and(|m| !m[b * seq + u]);
                        let val = s.as_f64() * scale + if masked { MASK_NEG } else { 0.0 };
                        row64[u] = val;
                        max = max.max(val);
                    }
                    let mut z = 0.0;
                    for e in row64.iter_mut() {
                        *e = (*e - max).exp();
                        z += *e;
                    }
                    for (u, e) in row64.iter().enumerate() {
                        p[t * seq + u] = T::from_f64_lossy(e / z);
                    }
                }
                T::gemm_strided(seq, seq, hd, p, (seq, 1), v, (c3, 1), &mut head_out, false);
                for t in 0..seq {
                    out[(b * seq + t) * h + j * hd..(b * seq + t) * h + (j + 1) * hd]
                        .copy_from_slice(&head_out[t * hd..(t + 1) * hd]);
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, h], out)?;
        let rg = self.any_grad(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, probs, batch, seq, heads }, rg))
    }

    /// Additive efficient normalization of per-player attributions.
    ///
    /// `phi` is `[batch·players, classes]`, `gap` is `[batch, classes]` holding
    /// `v(1) − v(0)` per sample and class. Every player of sample `b` receives
    /// the same shift `(gap − Σ_i phi_i) / players`, so columns of the output
    /// sum to `gap` exactly up to rounding.
    pub fn efficiency_normalize(&mut self, phi: Var, gap: &Tensor<T>, batch: usize, players: usize) -> Result<Var> {
        let (r, c) = dims2("efficiency_normalize", self.value(phi))?;
        if r != batch * players || gap.shape() != [batch, c] || players == 0 {
            return Err(Error::shape(
                "efficiency_normalize",
                format!("phi {:?}, gap {:?}, batch {batch}, players {players}", self.shape(phi), gap.shape()),
            ));
        }
        let src = self.value(phi).data();
        let mut out = src.to_vec();
        for b in 0..batch {
            for y in 0..c {
                let total: f64 = (0..players).map(|i| src[(b * players + i) * c + y].as_f64()).sum();
                let shift = T::from_f64_lossy((gap.data()[b * c + y].as_f64() - total) / players as f64);
                for i in 0..players {
                    out[(b * players + i) * c + y] += shift;
                }
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.any_grad(&[phi]);
        Ok(self.push(out, Op::EfficiencyNormalize { phi, batch, players }, rg))
    }

    /// Affine map `x·w + b` for `x: [R, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }
}

pub(crate) fn gelu_fwd<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    T::from_f64_lossy(0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_rows<T: Scalar>(data: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64_lossy(e / z)));
    }
    out
}
