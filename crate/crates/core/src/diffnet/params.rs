use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus the optimiser step counter.
///
/// Names are unique and shapes never change after registration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Registers a tensor drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    /// Overwrites a tensor in place; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.tensors[id.0];
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                node: self.names[id.0].clone(),
                detail: format!("{:?} vs {:?}", current.shape(), value.shape()),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }
}

/// Gradients keyed like the [`ParamStore`] they were computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    entries: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            entries: vec![None; params.len()],
        }
    }

    pub(crate) fn from_entries(entries: Vec<Option<Tensor>>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name<'a>(&'a self, params: &ParamStore, name: &str) -> Result<Option<&'a Tensor>> {
        Ok(self.get(params.id(name)?))
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        if self.entries.len() <= id.0 {
            self.entries.resize(id.0 + 1, None);
        }
        self.entries[id.0] = Some(g);
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.entries.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.entries.len() < other.entries.len() {
            self.entries.resize(other.entries.len(), None);
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
