use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::explain::{ExplainLoop, Explainer};
use super::{verify_frozen, LossRecord, Pipeline, Stage, StageConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BatchInput, Classifier, SideTunedModel, TokenHead, Transformer};
use crate::scalar::Scalar;
use crate::shapley::shapley_kernel;
use crate::tensor::Tensor;

/// A classifier with an explanation head reading its final token states.
#[derive(Clone, Debug)]
pub struct HeadExplainer<T> {
    pub net: Transformer,
    pub head: TokenHead,
    pub store: ParamStore<T>,
    pub pipeline: Pipeline,
}

pub const HEAD: &str = "exphead";

impl<T: Scalar> HeadExplainer<T> {
    pub(crate) fn new(classifier: &Classifier<T>, head_depth: usize, pipeline: Pipeline, seed: u64) -> Result<Self> {
        let mut store = classifier.store.clone();
        store.set_trainable_prefix("", pipeline == Pipeline::Duo);
        let cfg = classifier.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = TokenHead::new(&mut store, HEAD, cfg.hidden, head_depth, cfg.num_classes, &mut rng)?;
        Ok(HeadExplainer { net: classifier.net.clone(), head, store, pipeline })
    }

    pub fn classifier(&self) -> Classifier<T> {
        Classifier { net: self.net.clone(), store: self.store.clone() }
    }

    pub fn logits(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        self.classifier().logits(input)
    }
}

impl<T: Scalar> Explainer<T> for HeadExplainer<T> {
    fn explain_graph(&self, g: &mut Graph<T>, input: &BatchInput<T>) -> Result<(Var, Option<Var>)> {
        if input.keep.is_some() {
            return Err(Error::contract("explanation heads see the full input"));
        }
        let states = self.net.encode(g, &self.store, input)?;
        let last = *states.last().expect("depth >= 1");
        let phi = self.head.forward(g, &self.store, last, input.batch, input.num_tokens)?;
        let logits = match self.pipeline {
            Pipeline::Duo => Some(self.net.classify(g, &self.store, last, input.batch)?),
            _ => None,
        };
        Ok((phi, logits))
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

fn run_head_pipeline<T: Scalar>(
    classifier: &Classifier<T>,
    surrogate: &SideTunedModel<T>,
    data: &Dataset,
    head_depth: usize,
    config: &StageConfig,
    pipeline: Pipeline,
) -> Result<(HeadExplainer<T>, LossRecord)> {
    config.expect(Stage::Explainer, &[pipeline])?;
    let mut model = HeadExplainer::new(classifier, head_depth, pipeline, config.seed)?;
    let shared = model
        .store
        .iter()
        .filter(|(_, n, _)| {
            n.starts_with("backbone.") && !n.starts_with("backbone.head.") && !n.starts_with("backbone.norm.")
        })
        .map(|(id, _, t)| (id, t.numel()))
        .collect();
    let lp = ExplainLoop {
        surrogate,
        null: surrogate.null_value()?,
        kernel: shapley_kernel(classifier.config().num_tokens)?,
        config,
        stage_pipeline: pipeline,
        shared,
    };
    let before = model.store.clone();
    let record = lp.run(&mut model, data)?;
    if pipeline == Pipeline::Froyo {
        verify_frozen(&before, &model.store, |n| n.starts_with(&format!("{HEAD}.")))?;
    }
    Ok((model, record))
}

/// Freeze the classifier and train only a new explanation head on its final states.
pub fn train_froyo<T: Scalar>(
    classifier: &Classifier<T>,
    surrogate: &SideTunedModel<T>,
    data: &Dataset,
    head_depth: usize,
    config: &StageConfig,
) -> Result<(HeadExplainer<T>, LossRecord)> {
    run_head_pipeline(classifier, surrogate, data, head_depth, config, Pipeline::Froyo)
}

/// Train the encoder, prediction head and explanation head jointly, recording the
/// cosine between the two task gradients on the shared encoder at every step.
pub fn train_duo<T: Scalar>(
    classifier: &Classifier<T>,
    surrogate: &SideTunedModel<T>,
    data: &Dataset,
    head_depth: usize,
    config: &StageConfig,
) -> Result<(HeadExplainer<T>, LossRecord)> {
    run_head_pipeline(classifier, surrogate, data, head_depth, config, Pipeline::Duo)
}
