use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint;
use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a parameter counts toward weight penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

/// Named, ordered registry of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, tensor });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight)
            .collect()
    }

    pub fn weight_l1(&self) -> f64 {
        self.weight_ids()
            .iter()
            .map(|&id| self.get(id).sum_abs())
            .sum()
    }

    pub fn weight_l2(&self) -> f64 {
        self.weight_ids()
            .iter()
            .map(|&id| self.get(id).sum_squares())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor))
            .collect();
        checkpoint::write_file(path, &named)
    }

    /// Overwrites every registered tensor with the same-named one in the
    /// checkpoint. Missing names and shape changes are errors.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = checkpoint::read_file(path)?;
        self.assign(tensors)
    }

    pub fn assign(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut found: HashMap<String, Tensor> = tensors.into_iter().collect();
        for entry in &mut self.entries {
            let t = found.remove(&entry.name).ok_or_else(|| {
                AutogradError::Checkpoint(format!("missing tensor {}", entry.name))
            })?;
            if t.shape() != entry.tensor.shape() {
                return Err(AutogradError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor = t;
        }
        Ok(())
    }
}
