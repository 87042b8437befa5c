//! Reverse sweep over a recorded [`Graph`].

use std::collections::HashMap;

use crate::autodiff::graph::{gelu_grad, Graph, Op, Var};
use crate::autodiff::params::ParamId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty() -> Self {
        Gradients { params: HashMap::new(), leaves: HashMap::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of an [`Graph::input`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn insert_param(&mut self, id: ParamId, g: Tensor<T>) {
        self.params.insert(id, g);
    }

    /// Element-wise sum with another gradient set (missing entries count as zero).
    pub fn merged(mut self, other: &Gradients<T>) -> Self {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
        self
    }

    /// Flatten the gradients of `ids` (in the given order) into one f64 vector.
    /// Parameters without a gradient contribute zeros of the supplied length.
    pub fn flatten(&self, ids: &[(ParamId, usize)]) -> Vec<f64> {
        let mut out = Vec::new();
        for &(id, numel) in ids {
            match self.params.get(&id) {
                Some(g) => out.extend(g.data().iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat_n(0.0, numel)),
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    /// Exact reverse-mode derivative of a scalar `loss` with respect to every
    /// trainable parameter and every [`Graph::input`] leaf it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };
        if !self.requires_grad(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &*node.value;
            match &node.op {
                Op::Leaf { param } => {
                    match param {
                        Some(id) => out.params.insert(*id, g),
                        None => out.leaves.insert(idx, g),
                    };
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if self.requires_grad(*a) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm_strided(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, false);
                        acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm_strided(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, false);
                        acc(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if self.requires_grad(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.requires_grad(*bias) {
                        let n = g.cols();
                        let mut db = vec![0.0f64; n];
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v.as_f64();
                            }
                        }
                        acc(&mut grads, *bias, Tensor::from_f64(&[n], &db)?);
                    }
                    if self.requires_grad(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddTiled(a, tile) => {
                    if self.requires_grad(*tile) {
                        let ts = self.value(*tile).shape().to_vec();
                        let (p, n) = (ts[0], ts[1]);
                        let mut dt = vec![0.0f64; p * n];
                        for (i, row) in g.data().chunks(n).enumerate() {
                            let base = (i % p) * n;
                            for (j, v) in row.iter().enumerate() {
                                dt[base + j] += v.as_f64();
                            }
                        }
                        acc(&mut grads, *tile, Tensor::from_f64(&ts, &dt)?);
                    }
                    if self.requires_grad(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let ct = T::from_f64_lossy(*c);
                    acc(&mut grads, *a, g.map(|v| v * ct));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * T::from_f64_lossy(gelu_grad(xv.as_f64())))
                        .collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let n = g.cols();
                    let gam = self.value(*gamma).data();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0f64; n];
                        let mut db = vec![0.0f64; n];
                        for (row, xr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += row[j].as_f64() * xr[j].as_f64();
                                db[j] += row[j].as_f64();
                            }
                        }
                        if self.requires_grad(*gamma) {
                            acc(&mut grads, *gamma, Tensor::from_f64(&[n], &dg)?);
                        }
                        if self.requires_grad(*beta) {
                            acc(&mut grads, *beta, Tensor::from_f64(&[n], &db)?);
                        }
                    }
                    if self.requires_grad(*x) {
                        let mut dx = Vec::with_capacity(g.numel());
                        for ((row, xr), istd) in g.data().chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                            let dxh: Vec<f64> = (0..n).map(|j| row[j].as_f64() * gam[j].as_f64()).collect();
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh.iter().zip(xr).map(|(d, v)| d * v.as_f64()).sum();
                            for j in 0..n {
                                let v = istd / n as f64 * (n as f64 * dxh[j] - s1 - xr[j].as_f64() * s2);
                                dx.push(T::from_f64_lossy(v));
                            }
                        }
                        acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                    }
                }
                Op::Softmax(a) => {
                    let n = g.cols();
                    let mut dx = Vec::with_capacity(g.numel());
                    for (grow, yrow) in g.data().chunks(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for (gv, yv) in grow.iter().zip(yrow) {
                            dx.push(T::from_f64_lossy(yv.as_f64() * (gv.as_f64() - dot)));
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::LogSoftmax { x, probs } => {
                    let n = g.cols();
                    let mut dx = Vec::with_capacity(g.numel());
                    for (grow, prow) in g.data().chunks(n).zip(probs.chunks(n)) {
                        let s: f64 = grow.iter().map(|v| v.as_f64()).sum();
                        for (gv, pv) in grow.iter().zip(prow) {
                            dx.push(T::from_f64_lossy(gv.as_f64() - pv.as_f64() * s));
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Exp(a) => {
                    let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let two = T::from_f64_lossy(2.0);
                    let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * two * xv).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = T::from_f64_lossy(g.data()[0].as_f64() / x.numel() as f64);
                    acc(&mut grads, *a, Tensor::full(x.shape(), gv));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(shape)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        if self.requires_grad(*p) {
                            let piece = g.data()[offset..offset + len].to_vec();
                            acc(&mut grads, *p, Tensor::new(self.value(*p).shape().to_vec(), piece)?);
                        }
                        offset += len;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let src = self.value(*x);
                    let n = src.cols();
                    let mut dx = vec![T::zero(); src.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dx[r * n + j] += g.data()[k * n + j];
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(src.shape().to_vec(), dx)?);
                }
                Op::MaskedFill { x, mask } => {
                    let d = g.data().iter().zip(mask).map(|(&gv, &m)| if m { T::zero() } else { gv }).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::WithClassToken { tokens, cls, batch, seq } => {
                    let h = g.cols();
                    if self.requires_grad(*cls) {
                        let mut dc = vec![0.0f64; h];
                        for b in 0..*batch {
                            for (j, d) in dc.iter_mut().enumerate() {
                                *d += g.data()[b * (seq + 1) * h + j].as_f64();
                            }
                        }
                        acc(&mut grads, *cls, Tensor::from_f64(&[h], &dc)?);
                    }
                    if self.requires_grad(*tokens) {
                        let mut dt = Vec::with_capacity(batch * seq * h);
                        for b in 0..*batch {
                            let start = (b * (seq + 1) + 1) * h;
                            dt.extend_from_slice(&g.data()[start..start + seq * h]);
                        }
                        acc(&mut grads, *tokens, Tensor::new(vec![batch * seq, h], dt)?);
                    }
                }
                Op::Attention { qkv, probs, batch, seq, heads } => {
                    let dqkv = attention_backward(self.value(*qkv), probs, &g, *batch, *seq, *heads)?;
                    acc(&mut grads, *qkv, dqkv);
                }
                Op::EfficiencyNormalize { phi, batch, players } => {
                    let c = g.cols();
                    let mut d = g.data().to_vec();
                    for b in 0..*batch {
                        for yc in 0..c {
                            let s: f64 = (0..*players).map(|i| g.data()[(b * players + i) * c + yc].as_f64()).sum();
                            let shift = T::from_f64_lossy(s / *players as f64);
                            for i in 0..*players {
                                d[(b * players + i) * c + yc] -= shift;
                            }
                        }
                    }
                    acc(&mut grads, *phi, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
        }
        Ok(out)
    }
}

fn attention_backward<T: Scalar>(
    qkv: &Tensor<T>,
    probs: &[T],
    g: &Tensor<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let c3 = qkv.cols();
    let h = c3 / 3;
    let hd = h / heads;
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
    let src = qkv.data();
    let gd = g.data();
    let mut dqkv = vec![T::zero(); qkv.numel()];
    let mut da = vec![T::zero(); seq * seq];
    let mut ds = vec![T::zero(); seq * seq];
    let mut tmp = vec![T::zero(); seq * hd];
    for b in 0..batch {
        let base = b * seq * c3;
        let gbase = b * seq * h;
        for j in 0..heads {
            let p = &probs[(b * heads + j) * seq * seq..(b * heads + j + 1) * seq * seq];
            let q = &src[base + j * hd..];
            let k = &src[base + h + j * hd..];
            let v = &src[base + 2 * h + j * hd..];
            let dout = &gd[gbase + j * hd..];
            // dV = Pᵀ · dO
            T::gemm_strided(seq, seq, hd, p, (1, seq), dout, (h, 1), &mut tmp, false);
            scatter(&mut dqkv, &tmp, base + 2 * h + j * hd, c3, seq, hd);
            // dP = dO · Vᵀ
            T::gemm_strided(seq, hd, seq, dout, (h, 1), v, (1, c3), &mut da, false);
            for t in 0..seq {
                let prow = &p[t * seq..(t + 1) * seq];
                let darow = &da[t * seq..(t + 1) * seq];
                let dot: f64 = prow.iter().zip(darow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for u in 0..seq {
                    let val = prow[u].as_f64() * (darow[u].as_f64() - dot);
                    ds[t * seq + u] = T::from_f64_lossy(val) * scale;
                }
            }
            // dQ = dS · K
            T::gemm_strided(seq, seq, hd, &ds, (seq, 1), k, (c3, 1), &mut tmp, false);
            scatter(&mut dqkv, &tmp, base + j * hd, c3, seq, hd);
            // dK = dSᵀ · Q
            T::gemm_strided(seq, seq, hd, &ds, (1, seq), q, (c3, 1), &mut tmp, false);
            scatter(&mut dqkv, &tmp, base + h + j * hd, c3, seq, hd);
        }
    }
    Tensor::new(qkv.shape().to_vec(), dqkv)
}

fn scatter<T: Scalar>(dst: &mut [T], src: &[T], offset: usize, stride: usize, rows: usize, cols: usize) {
    for t in 0..rows {
        let d = &mut dst[offset + t * stride..offset + t * stride + cols];
        for (a, &b) in d.iter_mut().zip(&src[t * cols..(t + 1) * cols]) {
            *a += b;
        }
    }
}
