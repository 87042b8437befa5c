//! Run configuration: one TOML file with dotted sections, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, SideConfig, SideRole};
use crate::train::{ClassLoss, ClassWeighting, Pipeline, Stage, StageConfig};

/// Per-stage training knobs. The stage seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub masks_per_input: usize,
    pub inputs_per_batch: usize,
    pub pipeline: Pipeline,
    pub class_loss: ClassLoss,
    pub weighting: ClassWeighting,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            epochs: 4,
            step_size: 2e-3,
            batch_size: 32,
            masks_per_input: 16,
            inputs_per_batch: 2,
            pipeline: Pipeline::Autognothi,
            class_loss: ClassLoss::Mse,
            weighting: ClassWeighting::SurrogateProbs,
        }
    }
}

impl StageSettings {
    pub fn stage_config(&self, stage: Stage, seed: u64) -> StageConfig {
        let mut c = StageConfig::new(stage).with_epochs(self.epochs).with_step_size(self.step_size).with_seed(seed);
        c.batch_size = self.batch_size;
        c.masks_per_input = self.masks_per_input;
        c.inputs_per_batch = self.inputs_per_batch;
        c.pipeline = self.pipeline;
        c.class_loss = self.class_loss;
        c.weighting = self.weighting;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideSettings {
    pub reduction: usize,
    pub head_depth: usize,
}

impl SideSettings {
    pub fn side_config(&self, role: SideRole) -> SideConfig {
        SideConfig { reduction: self.reduction, role, head_depth: self.head_depth }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub side: SideSettings,
    #[serde(default)]
    pub classifier: StageSettings,
    #[serde(default)]
    pub surrogate: StageSettings,
    #[serde(default)]
    pub explainer: StageSettings,
}

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

impl RunConfig {
    /// Small planted-patch run that trains all three stages in well under a minute.
    pub fn toy() -> Self {
        let task = TaskSpec::planted_patch(12, 3, 2000, 1);
        let model = ModelConfig {
            depth: 2,
            hidden: 16,
            heads: 2,
            mlp_ratio: 2.0,
            num_tokens: task.num_tokens,
            token_input_dim: task.token_dim,
            num_classes: task.num_classes,
            positional: true,
        };
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            task,
            model,
            side: SideSettings { reduction: 2, head_depth: 3 },
            classifier: StageSettings { epochs: 8, ..StageSettings::default() },
            surrogate: StageSettings { epochs: 4, ..StageSettings::default() },
            explainer: StageSettings { epochs: 3, ..StageSettings::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        let t = &self.task;
        let m = &self.model;
        if (t.num_tokens, t.token_dim, t.num_classes) != (m.num_tokens, m.token_input_dim, m.num_classes) {
            return Err(Error::config(format!(
                "model expects {} tokens of dim {} and {} classes, task provides {}, {}, {}",
                m.num_tokens, m.token_input_dim, m.num_classes, t.num_tokens, t.token_dim, t.num_classes
            )));
        }
        self.side.side_config(SideRole::Explainer).validate(m)?;
        for stage in [Stage::Classifier, Stage::Surrogate, Stage::Explainer] {
            self.stage(stage).validate()?;
        }
        Ok(())
    }

    fn settings(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::Classifier => &self.classifier,
            Stage::Surrogate => &self.surrogate,
            Stage::Explainer => &self.explainer,
        }
    }

    /// Stage configuration with a seed derived from the run seed.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let offset = match stage {
            Stage::Classifier => 1,
            Stage::Surrogate => 2,
            Stage::Explainer => 3,
        };
        self.settings(stage).stage_config(stage, self.seed.wrapping_mul(1000).wrapping_add(offset))
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from [`RunConfig::toy`] when `None`) and apply `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => Self::toy().to_toml()?,
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Write the effective configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Parse `key=value` where key is dotted, e.g. `model.hidden=32`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override key {k:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set each dotted key in `table`, creating sections as needed. Later entries win.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("non-empty key");
        let mut node = &mut *table;
        for s in sections {
            let entry = node.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().ok_or_else(|| Error::config(format!("{key}: {s} is not a section")))?;
        }
        node.insert(last.to_string(), parse_value(raw));
    }
    Ok(())
}
