//! Seeded synthetic token-classification tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TokenSequence;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// A few marked tokens carry the label in the sign of their first coordinate.
    PlantedPatch,
    /// Label drawn from a softmax of a fixed linear map of the summed tokens.
    LinearLogit,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted-patch" => Ok(TaskKind::PlantedPatch),
            "linear-logit" => Ok(TaskKind::LinearLogit),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub num_classes: usize,
    /// Marked tokens per sample (planted-patch only).
    #[serde(default = "default_signal")]
    pub signal_tokens: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

fn default_signal() -> usize {
    3
}

impl TaskSpec {
    pub fn planted_patch(num_tokens: usize, signal_tokens: usize, samples: usize, seed: u64) -> Self {
        let (train, val) = (samples * 7 / 10, samples * 15 / 100);
        TaskSpec {
            kind: TaskKind::PlantedPatch,
            num_tokens,
            token_dim: 4,
            num_classes: 2,
            signal_tokens,
            train,
            val,
            test: samples - train - val,
            seed,
        }
    }

    pub fn linear_logit(num_tokens: usize, num_classes: usize, samples: usize, seed: u64) -> Self {
        let (train, val) = (samples * 7 / 10, samples * 15 / 100);
        TaskSpec {
            kind: TaskKind::LinearLogit,
            num_tokens,
            token_dim: 4,
            num_classes,
            signal_tokens: 0,
            train,
            val,
            test: samples - train - val,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tokens < 2 || self.token_dim == 0 || self.num_classes < 2 {
            return Err(Error::config(format!("degenerate task shape: {self:?}")));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::config("every split needs at least one sample"));
        }
        if self.kind == TaskKind::PlantedPatch {
            if self.signal_tokens == 0 || self.signal_tokens > self.num_tokens {
                return Err(Error::config(format!(
                    "signal tokens {} must be in 1..={}",
                    self.signal_tokens, self.num_tokens
                )));
            }
            if self.token_dim < 2 || self.num_classes != 2 {
                return Err(Error::config("planted-patch needs token_dim ≥ 2 and exactly 2 classes"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Row-major `[num_tokens, token_dim]`.
    pub tokens: Vec<f32>,
    pub label: usize,
    /// Indices of the marked tokens, empty for linear-logit.
    pub signal: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    /// Linear-logit weights `[num_classes, token_dim]`; empty otherwise.
    pub weights: Vec<f64>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Marker value on coordinate 1 of a signal token.
pub const MARKER: f64 = 3.0;

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, dim) = (spec.num_tokens, spec.token_dim);
    let weights: Vec<f64> = match spec.kind {
        TaskKind::LinearLogit => (0..spec.num_classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v / (dim as f64).sqrt())
            .collect(),
        TaskKind::PlantedPatch => Vec::new(),
    };
    let total = spec.train + spec.val + spec.test;
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let mut x: Vec<f64> = (0..d * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (label, signal) = match spec.kind {
            TaskKind::PlantedPatch => {
                for t in 0..d {
                    x[t * dim + 1] *= 0.5;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut idx: Vec<usize> = (0..d).collect();
                let (chosen, _) = idx.partial_shuffle(&mut rng, spec.signal_tokens);
                let mut signal = chosen.to_vec();
                signal.sort_unstable();
                let mut mean = 0.0;
                for &t in &signal {
                    x[t * dim] += sign * 1.5;
                    x[t * dim + 1] = MARKER;
                    mean += x[t * dim];
                }
                ((mean > 0.0) as usize, signal)
            }
            TaskKind::LinearLogit => {
                let logits = linear_logits(&weights, &x, d, dim, spec.num_classes);
                let probs = crate::autodiff::softmax_f64(&logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut label = spec.num_classes - 1;
                for (c, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        label = c;
                        break;
                    }
                }
                (label, Vec::new())
            }
        };
        samples.push(Sample { tokens: x.into_iter().map(|v| v as f32).collect(), label, signal });
    }
    let test = samples.split_off(spec.train + spec.val);
    let val = samples.split_off(spec.train);
    Ok(Dataset { spec: spec.clone(), weights, train: samples, val, test })
}

/// Logits of the generating model: `(2/√d) · Σ_j w_c · x_j`.
pub fn linear_logits(weights: &[f64], x: &[f64], d: usize, dim: usize, classes: usize) -> Vec<f64> {
    let scale = 2.0 / (d as f64).sqrt();
    (0..classes)
        .map(|c| {
            let w = &weights[c * dim..(c + 1) * dim];
            (0..d).map(|t| (0..dim).map(|k| w[k] * x[t * dim + k]).sum::<f64>()).sum::<f64>() * scale
        })
        .collect()
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sequence<T: Scalar>(&self, sample: &Sample) -> TokenSequence<T> {
        let (d, dim) = (self.spec.num_tokens, self.spec.token_dim);
        let data = sample.tokens.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        TokenSequence::new(Tensor::new(vec![d, dim], data).expect("sample shape")).expect("matrix")
    }

    pub fn sequences<T: Scalar>(&self, split: Split) -> Vec<TokenSequence<T>> {
        self.split(split).iter().map(|s| self.sequence(s)).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|s| s.label).collect()
    }

    /// Canonical byte encoding, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("serializable")
    }
}
