//! Named trainable tensors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Embedding,
    Norm,
    /// Step size of a weight quantizer.
    WeightStep,
    /// Step size of an activation or cache quantizer.
    ActStep,
}

impl ParamKind {
    pub fn is_step(self) -> bool {
        matches!(self, ParamKind::WeightStep | ParamKind::ActStep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    /// Multiplier applied to the optimizer learning rate for this tensor.
    pub lr_multiplier: f32,
}

/// Ordered parameter collection with lookup by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> usize {
        self.insert_with_lr(name, tensor, kind, 1.0)
    }

    pub fn insert_with_lr(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
        lr_multiplier: f32,
    ) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i] = Param {
                name,
                tensor,
                kind,
                lr_multiplier,
            };
            return i;
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            kind,
            lr_multiplier,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| SilqError::Input(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .position(name)
            .ok_or_else(|| SilqError::Input(format!("missing parameter `{name}`")))?;
        Ok(&mut self.params[i].tensor)
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}
