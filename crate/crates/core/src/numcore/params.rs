use std::collections::BTreeMap;

use super::rng::fnv1a64;
use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn set_trainable_where(&mut self, flag: bool, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if pred(name) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// 64-bit FNV-1a over name, shape and raw bits of every tensor selected by `pred`.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| pred(n)) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Places every tensor on the tape.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t)))
            .collect();
        Bindings { vars }
    }

    /// Writes tape gradients into the `grad` slot of every trainable tensor.
    pub fn collect_grads<T: Real>(&mut self, binds: &Bindings, grads: &Gradients<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let g = match binds.vars.get(name) {
                Some(&v) => grads.to_single(v, t.numel()),
                None => vec![0.0; t.numel()],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl From<BTreeMap<String, Tensor>> for ParamStore {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` not bound")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
