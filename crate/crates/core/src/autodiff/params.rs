use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named model parameters with a per-parameter frozen/trainable flag.
///
/// Values are shared with computation graphs through `Arc`, so building a
/// graph never copies weights. The optimizer writes through copy-on-write.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value: Arc::new(value), trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Replace a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "param.set",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Flip the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p.name.as_str(), &*p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// 64-bit FNV-1a over names and raw value bits of the selected parameters.
    pub fn fingerprint(&self, include: impl Fn(&str) -> bool) -> u64 {
        let mut h = crate::checkpoint::Fnv1a::new();
        for p in self.params.iter().filter(|p| include(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Names of parameters whose bits differ from `other` (same layout assumed).
    pub fn changed_names(&self, other: &ParamStore<T>) -> Vec<String> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| {
                a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.as_f64().to_bits() != y.as_f64().to_bits())
            })
            .map(|(a, _)| a.name.clone())
            .collect()
    }
}
