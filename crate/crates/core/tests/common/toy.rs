//! Small end-to-end training runs on the synthetic tasks.

use sidexplain::config::RunConfig;
use sidexplain::data::{generate, Dataset, TaskSpec};
use sidexplain::nn::{Classifier, SideTunedModel};
use sidexplain::train::{train_classifier, train_explainer, train_surrogate, LossRecord, Stage};

pub struct ToyRun {
    pub config: RunConfig,
    pub data: Dataset,
    pub classifier: Classifier<f32>,
    pub classifier_record: LossRecord,
    pub surrogate: SideTunedModel<f32>,
    pub surrogate_record: LossRecord,
    pub explainer: Option<(SideTunedModel<f32>, LossRecord)>,
}

impl ToyRun {
    pub fn explainer(&self) -> &SideTunedModel<f32> {
        &self.explainer.as_ref().expect("explainer trained").0
    }
}

/// Planted-patch, 12 tokens, 3 marked.
pub fn planted12() -> RunConfig {
    RunConfig::toy()
}

/// Planted-patch, 16 tokens, 3 marked; side branch at full width.
pub fn planted16() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.task = TaskSpec::planted_patch(16, 3, 2000, 1);
    cfg.model.num_tokens = 16;
    cfg.side.reduction = 1;
    cfg.surrogate.epochs = 10;
    cfg.surrogate.step_size = 1e-3;
    cfg
}

/// Linear-logit, 12 tokens, 3 classes; side branch at full width.
pub fn linear12() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.task = TaskSpec::linear_logit(12, 3, 3000, 4);
    cfg.model.num_classes = 3;
    cfg.side.reduction = 1;
    cfg.classifier.epochs = 10;
    cfg.explainer.epochs = 6;
    cfg
}

/// Tiny planted-patch run for quick pipeline tests.
pub fn tiny() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.task = TaskSpec::planted_patch(6, 2, 200, 3);
    cfg.model.num_tokens = 6;
    cfg.model.hidden = 8;
    cfg.classifier.epochs = 2;
    cfg.surrogate.epochs = 1;
    cfg.explainer.epochs = 1;
    cfg
}

pub fn train(cfg: &RunConfig, with_explainer: bool) -> ToyRun {
    cfg.validate().unwrap();
    let data = generate(&cfg.task).unwrap();
    let (classifier, classifier_record) =
        train_classifier::<f32>(&data, &cfg.model, &cfg.stage(Stage::Classifier)).unwrap();
    let (surrogate, surrogate_record) = train_surrogate(
        &classifier,
        &data,
        cfg.side.reduction,
        cfg.side.head_depth,
        &cfg.stage(Stage::Surrogate),
    )
    .unwrap();
    let explainer =
        with_explainer.then(|| train_explainer(&surrogate, &data, &cfg.stage(Stage::Explainer)).unwrap());
    ToyRun {
        config: cfg.clone(),
        data,
        classifier,
        classifier_record,
        surrogate,
        surrogate_record,
        explainer,
    }
}
