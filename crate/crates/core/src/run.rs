//! Stage-by-stage runs that read and write artifacts in an output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_classifier, save_head_explainer, save_side_tuned, Checkpoint, ModelRole};
use crate::config::RunConfig;
use crate::data::{generate, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{check_error_bound, evaluate, BoundReport, EvalOptions, EvalReport};
use crate::nn::{Classifier, SideRole, SideTunedModel};
use crate::report::{curves_csv, read_json, write_json, write_text};
use crate::train::{
    accuracy, train_classifier, train_duo, train_explainer, train_froyo, train_surrogate, HeadExplainer,
    LossRecord, Pipeline, Stage, SurrogateReport,
};

pub const DATASET: &str = "dataset.json";
pub const EVAL: &str = "eval.json";
pub const CURVES: &str = "curves.csv";
pub const BOUND: &str = "bound.json";

pub fn checkpoint_name(role: ModelRole) -> String {
    format!("{role}.ckpt")
}

pub fn checkpoint_path(dir: &Path, role: ModelRole) -> PathBuf {
    dir.join(checkpoint_name(role))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub role: ModelRole,
    pub checkpoint: PathBuf,
    pub initial_val_loss: f64,
    pub final_loss: f64,
    pub best_epoch: usize,
    /// Test accuracy of the classifier, or of the surrogate on full inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_cosine_steps: Option<usize>,
}

impl StageSummary {
    fn new(role: ModelRole, dir: &Path, record: &LossRecord) -> Self {
        StageSummary {
            role,
            checkpoint: checkpoint_path(dir, role),
            initial_val_loss: record.initial_val_loss,
            final_loss: record.final_loss,
            best_epoch: record.best_epoch,
            accuracy: None,
            negative_cosine_steps: None,
        }
    }
}

/// Generate the dataset and write it, with the effective configuration, into `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    cfg.persist(dir)?;
    let data = generate(&cfg.task)?;
    write_json(dir.join(DATASET), &data)?;
    Ok(data)
}

/// The dataset stored in `dir`, or a fresh one from the configured task when absent.
pub fn dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET);
    if !path.exists() {
        return generate(&cfg.task);
    }
    let data: Dataset = read_json(&path)?;
    if data.spec != cfg.task {
        return Err(Error::config(format!("{} was generated for a different task", path.display())));
    }
    Ok(data)
}

fn load(dir: &Path, role: ModelRole) -> Result<Checkpoint> {
    Checkpoint::load(checkpoint_path(dir, role))
}

pub fn load_classifier(cfg: &RunConfig, dir: &Path) -> Result<Classifier<f32>> {
    let ckpt = load(dir, ModelRole::Classifier)?;
    ckpt.expect_config(&cfg.model)?;
    ckpt.into_classifier()
}

pub fn load_surrogate(cfg: &RunConfig, dir: &Path) -> Result<SideTunedModel<f32>> {
    let ckpt = load(dir, ModelRole::Surrogate)?;
    ckpt.expect_config(&cfg.model)?;
    ckpt.into_surrogate()
}

pub fn load_explainer(cfg: &RunConfig, dir: &Path) -> Result<SideTunedModel<f32>> {
    let ckpt = load(dir, ModelRole::Explainer)?;
    ckpt.expect_config(&cfg.model)?;
    ckpt.into_explainer()
}

pub fn load_head_explainer(cfg: &RunConfig, dir: &Path, role: ModelRole) -> Result<HeadExplainer<f32>> {
    let ckpt = load(dir, role)?;
    ckpt.expect_config(&cfg.model)?;
    ckpt.into_head_explainer()
}

fn write_record(dir: &Path, role: ModelRole, record: &LossRecord) -> Result<()> {
    write_text(dir.join(format!("{role}-loss.csv")), &record.to_csv())?;
    write_json(dir.join(format!("{role}-loss.json")), record)
}

pub fn classifier_stage(cfg: &RunConfig, dir: &Path) -> Result<StageSummary> {
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let (clf, record) = train_classifier::<f32>(&data, &cfg.model, &cfg.stage(Stage::Classifier))?;
    save_classifier(&clf, checkpoint_path(dir, ModelRole::Classifier))?;
    write_record(dir, ModelRole::Classifier, &record)?;
    let mut summary = StageSummary::new(ModelRole::Classifier, dir, &record);
    summary.accuracy = Some(accuracy(&clf, &data.sequences(Split::Test), &data.labels(Split::Test))?);
    Ok(summary)
}

pub fn surrogate_stage(cfg: &RunConfig, dir: &Path) -> Result<StageSummary> {
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let clf = load_classifier(cfg, dir)?;
    let stage = cfg.stage(Stage::Surrogate);
    let (model, record) = train_surrogate(&clf, &data, cfg.side.reduction, cfg.side.head_depth, &stage)?;
    save_side_tuned(&model, checkpoint_path(dir, ModelRole::Surrogate))?;
    write_record(dir, ModelRole::Surrogate, &record)?;
    let xs = data.sequences(Split::Test);
    let report = SurrogateReport::measure(&model, &clf, &xs, &data.labels(Split::Test), 8, stage.seed)?;
    write_json(dir.join("surrogate-report.json"), &report)?;
    let mut summary = StageSummary::new(ModelRole::Surrogate, dir, &record);
    summary.accuracy = Some(report.full_accuracy);
    Ok(summary)
}

pub fn explainer_stage(cfg: &RunConfig, dir: &Path) -> Result<StageSummary> {
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let surrogate = load_surrogate(cfg, dir)?;
    let (model, record) = train_explainer(&surrogate, &data, &cfg.stage(Stage::Explainer))?;
    save_side_tuned(&model, checkpoint_path(dir, ModelRole::Explainer))?;
    write_record(dir, ModelRole::Explainer, &record)?;
    Ok(StageSummary::new(ModelRole::Explainer, dir, &record))
}

/// Train a Froyo or Duo explanation head using the explainer stage settings.
pub fn head_stage(cfg: &RunConfig, dir: &Path, pipeline: Pipeline) -> Result<StageSummary> {
    let role = match pipeline {
        Pipeline::Froyo => ModelRole::Froyo,
        Pipeline::Duo => ModelRole::Duo,
        other => return Err(Error::config(format!("{other:?} does not train an explanation head"))),
    };
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let clf = load_classifier(cfg, dir)?;
    let surrogate = load_surrogate(cfg, dir)?;
    let stage = cfg.stage(Stage::Explainer).with_pipeline(pipeline);
    let (model, record) = match pipeline {
        Pipeline::Froyo => train_froyo(&clf, &surrogate, &data, cfg.side.head_depth, &stage)?,
        _ => train_duo(&clf, &surrogate, &data, cfg.side.head_depth, &stage)?,
    };
    save_head_explainer(&model, checkpoint_path(dir, role))?;
    write_record(dir, role, &record)?;
    if pipeline == Pipeline::Duo {
        let mut csv = String::from("step,cosine\n");
        for (i, c) in record.cosine_trace.iter().enumerate() {
            csv.push_str(&format!("{i},{c}\n"));
        }
        write_text(dir.join("duo-gradient-conflict.csv"), &csv)?;
    }
    let mut summary = StageSummary::new(role, dir, &record);
    if pipeline == Pipeline::Duo {
        summary.negative_cosine_steps = Some(record.negative_cosine_steps());
    }
    Ok(summary)
}

/// Evaluate the explainer held in `role`'s checkpoint and write the report and curves.
pub fn evaluate_stage(cfg: &RunConfig, dir: &Path, role: ModelRole, options: &EvalOptions) -> Result<EvalReport> {
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let reference = load_classifier(cfg, dir)?;
    let side = cfg.side.side_config(SideRole::Explainer);
    let report = match role {
        ModelRole::Explainer => {
            let model = load_explainer(cfg, dir)?;
            evaluate(&model, &model, &reference, &model.backbone_classifier(), &side, &data, options)?
        }
        ModelRole::Froyo | ModelRole::Duo => {
            let surrogate = load_surrogate(cfg, dir)?;
            let head = load_head_explainer(cfg, dir, role)?;
            evaluate(&head, &surrogate, &reference, &head.classifier(), &side, &data, options)?
        }
        other => return Err(Error::Role { expected: "explainer, froyo or duo".into(), found: other.to_string() }),
    };
    let prefix = if role == ModelRole::Explainer { String::new() } else { format!("{role}-") };
    write_json(dir.join(format!("{prefix}{EVAL}")), &report)?;
    write_text(dir.join(format!("{prefix}{CURVES}")), &curves_csv(&report))?;
    Ok(report)
}

/// Check the explainer error bound on the first `samples` test inputs.
pub fn bound_stage(cfg: &RunConfig, dir: &Path, samples: usize, masks: usize) -> Result<BoundReport> {
    cfg.persist(dir)?;
    let data = dataset(cfg, dir)?;
    let model = load_explainer(cfg, dir)?;
    let xs = data.sequences(Split::Test);
    let n = samples.min(xs.len());
    let report = check_error_bound(&model, &model, &xs[..n], masks, cfg.seed)?;
    write_json(dir.join(BOUND), &report)?;
    Ok(report)
}

/// Bytes of every artifact in `dir`, sorted by file name.
pub fn artifact_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push((entry.file_name().to_string_lossy().into_owned(), bytes));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

