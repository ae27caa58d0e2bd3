//! Named learnable tensors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer group a parameter belongs to; each group has its own lr multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Embedding,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Insertion-ordered parameter store. Ids are dense indices, so creation order
/// (and therefore the seeded initialization) is part of a model's identity.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        ParamId(id)
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std);
        self.add(name, group, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Overwrite values from `(name, tensor)` pairs; every stored parameter must be covered.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for e in &mut self.entries {
            let t = tensors
                .get(&e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: e.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}
