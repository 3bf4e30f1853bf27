//! Named parameter and buffer storage shared by every module.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::BnUpdate;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the model a trainable tensor belongs to. Used by the
/// backbone-freeze switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch embedding, attention, FFN and their norms.
    Backbone,
    /// Prompters, prompt projections and PFI units.
    Prompt,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable(ParamGroup),
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

impl<T> Entry<T> {
    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, ParamKind::Trainable(_))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let tensor = match kind {
            ParamKind::Trainable(_) => tensor.with_requires_grad(),
            ParamKind::Buffer => tensor,
        };
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, tensor, kind });
        id
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_trainable()).map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Add gradients produced by [`crate::graph::Graph::param_grads`].
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<T>)]) -> Result<()> {
        for (id, g) in grads {
            self.entries[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Fold batch statistics into running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::ONE - m;
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
                let t = self.get_mut(id);
                t.data_mut().iter_mut().zip(batch).for_each(|(r, &b)| *r = keep * *r + m * b);
            }
        }
    }

    /// Copy with every tensor converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replace tensor values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .id(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix while building a model.
pub struct Builder<'s, T> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'s, T: Real> Builder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut Rng, group: ParamGroup) -> Self {
        Self { store, rng, prefix: String::new(), group }
    }

    /// Child builder that prefixes names with `name.` and may switch group.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    /// Child builder with the same prefix and a different group.
    pub fn regroup(&mut self, group: ParamGroup) -> Builder<'_, T> {
        Builder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group }
    }

    pub fn group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, tensor, ParamKind::Trainable(self.group))
    }

    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, tensor, ParamKind::Buffer)
    }

    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -b, b, self.rng);
        self.param(name, t)
    }

    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let b = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -b, b, self.rng);
        self.param(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.param(name, Tensor::full(shape, T::lit(v)))
    }
}
