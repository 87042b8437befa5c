use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::backward::Gradients;
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    PlainGd,
    Adam { beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64 },
}

impl Scheme {
    pub fn adam() -> Self {
        Scheme::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Iteration budget for loops that run a fixed number of steps.
    pub steps: u64,
    pub scheme: Scheme,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { step_size: 1e-4, steps: 0, scheme: Scheme::adam() }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// First-order optimizer over the trainable subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    t: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, t: 0, moments: HashMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter. Frozen parameters are
    /// never touched, whatever `grads` contains.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            if grads.param(id).is_none() {
                return Err(Error::contract(format!("no gradient for trainable parameter {}", store.name(id))));
            }
        }
        self.t += 1;
        let lr = self.config.step_size;
        for id in ids {
            let g = grads.param(id).expect("checked above");
            let name = store.name(id).to_string();
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", format!("{name}: grad {:?} vs {:?}", g.shape(), p.shape())));
            }
            match self.config.scheme {
                Scheme::PlainGd => {
                    let a = T::from_f64_lossy(lr);
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= a * gv;
                    }
                }
                Scheme::Adam { beta1, beta2, epsilon, weight_decay } => {
                    let n = p.numel();
                    let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    for i in 0..n {
                        let gv = g.data()[i].as_f64();
                        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gv;
                        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gv * gv;
                        m[i] = T::from_f64_lossy(mi);
                        v[i] = T::from_f64_lossy(vi);
                        let w = p.data()[i].as_f64();
                        let upd = (mi / bc1) / ((vi / bc2).sqrt() + epsilon) + weight_decay * w;
                        p.data_mut()[i] = T::from_f64_lossy(w - lr * upd);
                    }
                }
            }
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("optimizer step {}", self.t),
                    detail: format!("parameter {name} diverged"),
                });
            }
        }
        Ok(())
    }
}
