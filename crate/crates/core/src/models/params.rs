//! Named parameter tensors and their per-forward binding onto a tape.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::Rng;

use super::ModelError;
use crate::autodiff::{Gradients, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Reads made through [`ParamStore::bind`] can be traced, which is how the
/// inference path is checked to stay clear of training-only parameters.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    trace: Mutex<Option<BTreeSet<String>>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
            trace: Mutex::new(None),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.names.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    /// Starts recording the names of parameters bound onto tapes.
    pub fn start_trace(&self) {
        *self.trace.lock().expect("trace lock") = Some(BTreeSet::new());
    }

    /// Stops recording and returns every name bound since [`start_trace`](Self::start_trace).
    pub fn take_trace(&self) -> BTreeSet<String> {
        self.trace
            .lock()
            .expect("trace lock")
            .take()
            .unwrap_or_default()
    }

    /// Registers parameter `name` as a tape leaf, reusing the leaf if this
    /// binding already holds it.
    pub fn bind(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        name: &str,
    ) -> Result<Var, ModelError> {
        let idx = self
            .position(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if let Some(trace) = self.trace.lock().expect("trace lock").as_mut() {
            trace.insert(name.to_string());
        }
        if binding.vars.len() < self.len() {
            binding.vars.resize(self.len(), None);
        }
        if let Some(v) = binding.vars[idx] {
            return Ok(v);
        }
        let v = tape.leaf(self.tensors[idx].clone());
        binding.vars[idx] = Some(v);
        Ok(v)
    }

    /// Adds a tensor drawn from `U(-bound, bound)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<(), ModelError> {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.insert(name, t)
    }
}

/// Which parameters of one store were placed on the current tape.
#[derive(Debug, Default, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }

    /// Gradients for every bound parameter; unbound entries stay `None`.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> ParamGrads {
        let entries = (0..store.len())
            .map(|i| self.var(i).map(|v| grads.tensor(v)))
            .collect();
        ParamGrads { entries }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    entries: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.entries.get(index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    /// Mutable slot for accumulating gradients over several samples.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.entries.len() < other.entries.len() {
            self.entries.resize(other.entries.len(), None);
        }
        for (i, g) in other.iter() {
            match &mut self.entries[i] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.entries.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
