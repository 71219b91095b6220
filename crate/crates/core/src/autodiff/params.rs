use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named parameter tensors. Names are ordered so registration order on a
/// tape, optimizer updates and serialization are all deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`: as a leaf when `trainable` accepts
    /// the name, otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), (v, trainable(name)))
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, (Var, bool)>,
}

impl BoundParams {
    /// Wraps existing tape variables, all treated as trainable.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams {
            vars: vars.into_iter().map(|(k, v)| (k, (v, true))).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::data(format!("parameter `{name}` not bound")))
    }

    /// Gradients of the trainable parameters, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (v, _))| (name.clone(), grads.get(*v)))
            .collect()
    }

    /// Trainable handles whose name satisfies `pred`.
    pub fn trainable_vars(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, (_, t))| *t && pred(name))
            .map(|(_, (v, _))| *v)
            .collect()
    }
}
