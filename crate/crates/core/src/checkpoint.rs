use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::nn::{Classifier, CombinedModel, ModelConfig, SideTunedModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{HeadExplainer, Pipeline};

/// 64-bit FNV-1a.
#[derive(Clone, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.update(bytes);
        h.finish()
    }
}

pub const MAGIC: &[u8; 4] = b"AGN1";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    Classifier,
    Surrogate,
    Explainer,
    Duo,
    Froyo,
}

impl ModelRole {
    fn code(self) -> u32 {
        match self {
            ModelRole::Classifier => 0,
            ModelRole::Surrogate => 1,
            ModelRole::Explainer => 2,
            ModelRole::Duo => 3,
            ModelRole::Froyo => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => ModelRole::Classifier,
            1 => ModelRole::Surrogate,
            2 => ModelRole::Explainer,
            3 => ModelRole::Duo,
            4 => ModelRole::Froyo,
            other => return Err(Error::Corrupt(format!("unknown role tag {other}"))),
        })
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelRole::Classifier => "classifier",
            ModelRole::Surrogate => "surrogate",
            ModelRole::Explainer => "explainer",
            ModelRole::Duo => "duo",
            ModelRole::Froyo => "froyo",
        };
        f.write_str(s)
    }
}

/// Architecture needed to rebuild a model before its weights are restored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_depth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A decoded checkpoint file.
///
/// Layout, all integers little-endian: magic, `u32` version, `u32` role, `u32`
/// length plus JSON config, `u32` tensor count, then per tensor `u32` name length,
/// name, `u8` trainable, `u32` rank, `u64` dims, `f32` values. A trailing `u64`
/// FNV-1a digest covers every preceding byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: ModelRole,
    pub config: ConfigSnapshot,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    fn from_store<T: Scalar>(role: ModelRole, config: ConfigSnapshot, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(id, name, t)| NamedTensor {
                name: name.to_string(),
                trainable: store.is_trainable(id),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { role, config, tensors }
    }

    pub fn from_classifier<T: Scalar>(model: &Classifier<T>) -> Self {
        let config = ConfigSnapshot { model: model.config().clone(), reduction: None, head_depth: None };
        Self::from_store(ModelRole::Classifier, config, &model.store)
    }

    pub fn from_side_tuned<T: Scalar>(model: &SideTunedModel<T>) -> Self {
        let role = if model.explainer.is_some() { ModelRole::Explainer } else { ModelRole::Surrogate };
        let config = ConfigSnapshot {
            model: model.config().clone(),
            reduction: Some(model.reduction),
            head_depth: Some(model.head_depth),
        };
        Self::from_store(role, config, &model.store)
    }

    pub fn from_head_explainer<T: Scalar>(model: &HeadExplainer<T>) -> Result<Self> {
        let role = match model.pipeline {
            Pipeline::Duo => ModelRole::Duo,
            Pipeline::Froyo => ModelRole::Froyo,
            other => return Err(Error::contract(format!("no checkpoint role for a {other:?} head explainer"))),
        };
        let config =
            ConfigSnapshot { model: model.net.config.clone(), reduction: None, head_depth: Some(model.head.hidden.len()) };
        Ok(Self::from_store(role, config, &model.store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.role.code().to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.trainable as u8);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Fnv1a::hash(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("missing magic header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = Fnv1a::hash(payload);
        if stored != actual {
            return Err(Error::Corrupt(format!("digest mismatch: stored {stored:016x}, computed {actual:016x}")));
        }
        let mut r = Reader { buf: payload, pos: 8 };
        let role = ModelRole::from_code(r.u32()?)?;
        let json_len = r.u32()? as usize;
        let config: ConfigSnapshot = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Corrupt(format!("bad trainable flag {b} on {name}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Corrupt(format!("shape overflow on {name}")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, trainable, shape, data });
        }
        if r.pos != payload.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Checkpoint { role, config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_role(&self, allowed: &[ModelRole]) -> Result<()> {
        if allowed.contains(&self.role) {
            return Ok(());
        }
        let expected = allowed.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" or ");
        Err(Error::Role { expected, found: self.role.to_string() })
    }

    /// Errors unless the stored architecture equals `config`.
    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.config.model != config {
            return Err(Error::config(format!(
                "checkpoint was written for {:?}, loader expects {:?}",
                self.config.model, config
            )));
        }
        Ok(())
    }

    fn side_dims(&self) -> Result<(usize, usize)> {
        match (self.config.reduction, self.config.head_depth) {
            (Some(r), Some(m)) => Ok((r, m)),
            _ => Err(Error::Corrupt(format!("{} checkpoint lacks side configuration", self.role))),
        }
    }

    /// Overwrite every parameter of `store` by name; the name sets must agree exactly.
    fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store.id(&t.name).ok_or_else(|| Error::Corrupt(format!("unexpected tensor {}", t.name)))?;
            if store.get(id).shape() != t.shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    store.get(id).shape()
                )));
            }
            let data = t.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            store.set(id, Tensor::new(t.shape.clone(), data)?)?;
            store.set_trainable(id, t.trainable);
        }
        Ok(())
    }

    pub fn into_classifier<T: Scalar>(&self) -> Result<Classifier<T>> {
        self.expect_role(&[ModelRole::Classifier])?;
        let mut model = Classifier::new(&self.config.model, 0)?;
        self.restore(&mut model.store)?;
        Ok(model)
    }

    fn side_tuned<T: Scalar>(&self) -> Result<SideTunedModel<T>> {
        let (reduction, head_depth) = self.side_dims()?;
        let base = Classifier::new(&self.config.model, 0)?;
        let mut model = SideTunedModel::with_surrogate(&base, reduction, head_depth, 0)?;
        if self.role == ModelRole::Explainer {
            model.attach_explainer(0)?;
        }
        self.restore(&mut model.store)?;
        Ok(model)
    }

    pub fn into_surrogate<T: Scalar>(&self) -> Result<SideTunedModel<T>> {
        self.expect_role(&[ModelRole::Surrogate])?;
        self.side_tuned()
    }

    pub fn into_explainer<T: Scalar>(&self) -> Result<SideTunedModel<T>> {
        self.expect_role(&[ModelRole::Explainer])?;
        self.side_tuned()
    }

    pub fn into_combined<T: Scalar>(&self) -> Result<CombinedModel<T>> {
        CombinedModel::new(self.into_explainer()?)
    }

    pub fn into_head_explainer<T: Scalar>(&self) -> Result<HeadExplainer<T>> {
        self.expect_role(&[ModelRole::Duo, ModelRole::Froyo])?;
        let head_depth =
            self.config.head_depth.ok_or_else(|| Error::Corrupt("head explainer checkpoint lacks head depth".into()))?;
        let pipeline = if self.role == ModelRole::Duo { Pipeline::Duo } else { Pipeline::Froyo };
        let base = Classifier::new(&self.config.model, 0)?;
        let mut model = HeadExplainer::new(&base, head_depth, pipeline, 0)?;
        self.restore(&mut model.store)?;
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_classifier<T: Scalar>(model: &Classifier<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_classifier(model).save(path)
}

pub fn save_side_tuned<T: Scalar>(model: &SideTunedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_side_tuned(model).save(path)
}

pub fn save_head_explainer<T: Scalar>(model: &HeadExplainer<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_head_explainer(model)?.save(path)
}
