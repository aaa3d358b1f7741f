use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{DassError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor. Optimizer groups and gradient audits are keyed by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution and linear weights (theta).
    Weight,
    /// Biases and batch-norm affine parameters. Never masked.
    Affine,
    /// Pruning scores.
    Score,
    /// Binary pruning masks.
    Mask,
    /// Architecture parameters.
    Alpha,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::Weight,
        ParamKind::Affine,
        ParamKind::Score,
        ParamKind::Mask,
        ParamKind::Alpha,
        ParamKind::Buffer,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A small set of [`ParamKind`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KindSet(u8);

impl KindSet {
    pub const NONE: KindSet = KindSet(0);

    pub fn of(kinds: &[ParamKind]) -> Self {
        KindSet(kinds.iter().fold(0, |acc, k| acc | k.bit()))
    }

    /// Weights plus biases and affine parameters.
    pub fn theta() -> Self {
        Self::of(&[ParamKind::Weight, ParamKind::Affine])
    }

    pub fn contains(self, kind: ParamKind) -> bool {
        self.0 & kind.bit() != 0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, typed tensors owned by one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DassError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_of(&self, kinds: KindSet) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| kinds.contains(p.kind))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn numel_of(&self, kinds: KindSet) -> usize {
        self.params
            .iter()
            .filter(|p| kinds.contains(p.kind))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), grad.to_vec())
                        .expect("gradient length matches parameter"),
                );
            }
        }
    }

    /// Names of parameters of the given kinds whose gradient buffer holds a non-zero entry.
    pub fn nonzero_grads(&self, kinds: KindSet) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| kinds.contains(p.kind))
            .filter(|p| p.grad.as_ref().is_some_and(|g| g.data().iter().any(|v| *v != 0.0)))
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Copies values of every parameter in `other` whose name and shape match.
    /// Returns the number of copied tensors.
    pub fn copy_matching_from(&mut self, other: &ParamStore, kinds: KindSet) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if !kinds.contains(p.kind) {
                continue;
            }
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Bit-level fingerprint of all values of the given kinds.
    pub fn fingerprint(&self, kinds: KindSet) -> Vec<u32> {
        self.params
            .iter()
            .filter(|p| kinds.contains(p.kind))
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}
