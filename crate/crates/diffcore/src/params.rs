//! Named parameter storage with per-tensor frozen flags.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::tensor::{fnv1a, seeded_init, Float, Init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
    pub seed: u64,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
    master_seed: u64,
}

impl<T: Float> ParamStore<T> {
    pub fn new(master_seed: u64) -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new(), master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Registers a parameter. Its seed depends only on the master seed and the
    /// name, so adding unrelated parameters never perturbs existing ones.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let seed = self.master_seed ^ fnv1a(name.as_bytes());
        let value = seeded_init(shape, seed, init);
        self.insert(ParamEntry { name: name.to_string(), value, frozen: false, seed, init })
    }

    pub fn insert(&mut self, entry: ParamEntry<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&entry.name) {
            return Err(DiffError::DuplicateParam(entry.name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(entry.name.clone(), id);
        self.entries.push(entry);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| !self.is_frozen(*id))
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                    seed: e.seed,
                    init: e.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
            master_seed: self.master_seed,
        }
    }

    /// Copies values (not flags) of every parameter present in `other` by name.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for e in other.entries() {
            if let Some(&id) = self.by_name.get(&e.name) {
                let dst = &mut self.entries[id.0].value;
                if dst.shape() != e.value.shape() {
                    return Err(DiffError::Shape {
                        op: "load_values_from",
                        shapes: vec![dst.shape().to_vec(), e.value.shape().to_vec()],
                    });
                }
                *dst = e.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Gradients indexed by [`ParamId`]; frozen parameters hold exact zeros.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Float> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        let dst = self.grads[id.0].data_mut();
        for (d, s) in dst.iter_mut().zip(g.data()) {
            *d = *d + *s;
        }
    }

    pub fn is_all_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].data().iter().all(|v| *v == T::zero())
    }

    /// Global L2 norm over the listed parameters, reduced in id order.
    pub fn norm(&self, ids: impl Iterator<Item = ParamId>) -> f64 {
        ids.map(|id| self.grads[id.0].sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.add("w", &[2], Init::Zeros).unwrap();
        assert!(matches!(s.add("w", &[2], Init::Zeros), Err(DiffError::DuplicateParam(_))));
    }

    #[test]
    fn seeds_depend_on_name_not_order() {
        let mut a = ParamStore::<f64>::new(5);
        a.add("x", &[3], Init::NormalScaled).unwrap();
        a.add("y", &[3], Init::NormalScaled).unwrap();
        let mut b = ParamStore::<f64>::new(5);
        b.add("y", &[3], Init::NormalScaled).unwrap();
        assert!(a.get(a.id("y").unwrap()).bit_eq(b.get(b.id("y").unwrap())));
    }
}
