//! Named parameter store with a stable iteration order.
//!
//! Models register tensors once at construction; the registration order
//! fixes the checkpoint manifest and the optimizer state layout.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Real, Tape, Tensor, Var};

pub struct Params<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let idx = self.index[name];
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let idx = self.index[name];
        &mut self.tensors[idx]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.numel()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.tensors.iter_mut().map(|t| t.data_mut()).collect()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Tape handles for one step's bound parameters, in registration order.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

impl<F: Real> Params<F> {
    /// Copy every parameter onto a fresh tape. `trainable` controls whether
    /// gradients are tracked.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients for every parameter after backward(), in registration
    /// order. Parameters the loss never touched get zero vectors.
    pub fn collect_grads(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Vec<F>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![F::zero(); t.numel()],
            })
            .collect()
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier<F: Real>(dims: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| F::of(rng.random_range(-limit..limit)))
}
