use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces values by name; every stored parameter must be present with a matching shape.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut missing = Vec::new();
        let mut by_name: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            match by_name.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => missing.push(format!(
                    "{name}: shape {:?} expected {:?}",
                    t.shape(),
                    slot.shape()
                )),
                None => missing.push(format!("{name}: missing")),
            }
        }
        missing.extend(by_name.keys().map(|k| format!("{k}: unexpected")));
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("checkpoint mismatch: {}", missing.join(", "))))
        }
    }
}

/// A [`Tape`] with every parameter of a store bound as a differentiable leaf.
pub struct Graph {
    pub tape: Tape,
    params: Vec<Var>,
}

impl Graph {
    pub fn bind(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        let params = store.values.iter().map(|t| tape.leaf(t.clone())).collect();
        Graph { tape, params }
    }

    /// A graph without parameters, for pure evaluation.
    pub fn empty() -> Self {
        Graph {
            tape: Tape::new(),
            params: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}
