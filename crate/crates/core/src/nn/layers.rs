use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight initialization families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming,
    /// Normal with std `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
}

impl Init {
    fn std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Affine layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], init.std(fan_in, fan_out)), trainable)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), trainable)?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, trainable: bool) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one()), trainable)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]), trainable)?;
        Ok(LayerNorm { gamma, beta, width })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm transformer block: `z + MSA(LN(z), s)` then `z + MLP(LN(z))`.
#[derive(Clone, Debug)]
pub struct MsaBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MsaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_hidden: usize,
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MsaBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, trainable)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, init, trainable, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), width, width, init, trainable, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, trainable)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), width, mlp_hidden, init, trainable, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_hidden, width, init, trainable, rng)?,
            heads,
            width,
        })
    }

    /// `z` is `[batch·seq, width]`; `keep` marks which tokens may be attended to.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        keep: Option<&[bool]>,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let u = self.ln1.forward(g, store, z)?;
        let qkv = self.qkv.forward(g, store, u)?;
        let a = g.attention(qkv, keep, batch, seq, self.heads)?;
        let a = self.proj.forward(g, store, a)?;
        let z = g.add(z, a)?;
        let u = self.ln2.forward(g, store, z)?;
        let m = self.fc1.forward(g, store, u)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, store, m)?;
        g.add(z, m)
    }

    /// Analytic parameter count for a block of the given shape.
    pub fn count(width: usize, mlp_hidden: usize) -> usize {
        let ln = 2 * width;
        ln + (width * 3 * width + 3 * width) + (width * width + width) + ln + (width * mlp_hidden + mlp_hidden) + (mlp_hidden * width + width)
    }
}
