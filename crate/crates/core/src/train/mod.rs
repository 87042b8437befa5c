//! Training stages: classifier, surrogate, explainer, and the comparison pipelines.

mod classifier;
pub mod convex;
mod explain;
mod pipelines;
mod surrogate;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerConfig, ParamStore, Scheme};
use crate::error::{Error, Result};

pub use classifier::{accuracy, argmax as argmax_index, train_classifier};
pub use explain::{explanation_targets, train_explainer, Explainer, ExplanationTargets};
pub use pipelines::{train_duo, train_froyo, HeadExplainer};
pub use surrogate::{kl_divergence, train_surrogate, SurrogateReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Classifier,
    Surrogate,
    Explainer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Frozen backbone with trainable side branches.
    Autognothi,
    /// Backbone encoder trained together with the side branch.
    FullFinetune,
    /// Frozen classifier, only a new explanation head trains.
    Froyo,
    /// Shared encoder trained on prediction and explanation jointly.
    Duo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLoss {
    /// Squared error between the softmax output and the one-hot label.
    Mse,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    /// Every class weighted by the surrogate's full-input probability.
    SurrogateProbs,
    /// Only the ground-truth class.
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Samples per classifier step.
    pub batch_size: usize,
    pub masks_per_input: usize,
    pub inputs_per_batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub class_loss: ClassLoss,
    pub weighting: ClassWeighting,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            epochs: 1,
            batch_size: 32,
            masks_per_input: 16,
            inputs_per_batch: 2,
            optimizer: OptimizerConfig { step_size: 1e-4, steps: 0, scheme: Scheme::adam() },
            seed: 0,
            pipeline: Pipeline::Autognothi,
            class_loss: ClassLoss::Mse,
            weighting: ClassWeighting::SurrogateProbs,
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.optimizer.step_size = step_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_pipeline(mut self, pipeline: Pipeline) -> Self {
        self.pipeline = pipeline;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.inputs_per_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.masks_per_input == 0 || self.masks_per_input % 2 != 0 {
            return Err(Error::config(format!(
                "masks_per_input must be a positive even number for paired sampling, got {}",
                self.masks_per_input
            )));
        }
        self.optimizer.validate()
    }

    fn expect(&self, stage: Stage, pipelines: &[Pipeline]) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::config(format!("stage config is for {:?}, not {stage:?}", self.stage)));
        }
        if !pipelines.contains(&self.pipeline) {
            return Err(Error::config(format!("pipeline {:?} is not valid for the {stage:?} stage", self.pipeline)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub pipeline: Pipeline,
    pub step_losses: Vec<f64>,
    /// Validation loss before any update.
    pub initial_val_loss: f64,
    /// Validation loss after each epoch.
    pub val_losses: Vec<f64>,
    /// Index into `val_losses` of the retained checkpoint.
    pub best_epoch: usize,
    /// Validation loss of the retained checkpoint.
    pub final_loss: f64,
    /// Loss attained by exact Shapley values, when an oracle is available.
    pub optimal_loss: Option<Estimate>,
    /// Cosine similarity between task gradients at each joint step.
    pub cosine_trace: Vec<f64>,
}

impl LossRecord {
    fn new(stage: Stage, pipeline: Pipeline, initial_val_loss: f64) -> Self {
        LossRecord {
            stage,
            pipeline,
            step_losses: Vec::new(),
            initial_val_loss,
            val_losses: Vec::new(),
            best_epoch: 0,
            final_loss: initial_val_loss,
            optimal_loss: None,
            cosine_trace: Vec::new(),
        }
    }

    pub fn negative_cosine_steps(&self) -> usize {
        self.cosine_trace.iter().filter(|&&c| c < 0.0).count()
    }

    /// `(step, loss)` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Keeps the parameters of the epoch with the lowest validation loss.
struct BestTracker<T> {
    best: Option<(f64, ParamStore<T>)>,
}

impl<T: Clone> BestTracker<T> {
    fn new() -> Self {
        BestTracker { best: None }
    }

    fn observe(&mut self, record: &mut LossRecord, val: f64, store: &ParamStore<T>) -> Result<()> {
        if !val.is_finite() {
            return Err(Error::NonFinite { stage: format!("{:?} validation", record.stage), detail: format!("{val}") });
        }
        record.val_losses.push(val);
        if self.best.as_ref().is_none_or(|(b, _)| val < *b) {
            record.best_epoch = record.val_losses.len() - 1;
            record.final_loss = val;
            self.best = Some((val, store.clone()));
        }
        Ok(())
    }

    fn into_store(self) -> ParamStore<T> {
        self.best.expect("at least one epoch").1
    }
}

fn shuffled(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn check_loss(stage: Stage, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: format!("{stage:?} step {step}"), detail: format!("loss {loss}") })
    }
}

/// Names whose values differ between two stores, checked against the declared trainable set.
pub fn verify_frozen<T: crate::Scalar>(before: &ParamStore<T>, after: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Result<()> {
    let changed = before.changed_names(after);
    if let Some(bad) = changed.iter().find(|n| !trainable(n)) {
        return Err(Error::Invariant(format!("frozen parameter {bad} changed during training")));
    }
    Ok(())
}
