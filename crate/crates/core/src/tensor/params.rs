use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Graph handles for every parameter of a [`ParamStore`] bound to one graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    /// Adds a tensor drawn from `N(0, std^2)`.
    pub fn insert_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Gradients per parameter after `g.backward`; parameters the loss did not touch get zeros.
    pub fn collect_grads(&self, g: &Graph, bound: &BoundParams) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, t)| {
                let grad = bound
                    .vars
                    .get(k)
                    .and_then(|&v| g.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (k.clone(), grad)
            })
            .collect()
    }

    /// Errors listing every name or shape that differs from `expected`.
    pub fn check_compatible(&self, expected: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &expected.params {
            match self.params.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(have) if have.shape() != t.shape() => problems.push(format!(
                    "{name}: shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )),
                _ => {}
            }
        }
        for name in self.params.keys() {
            if !expected.params.contains_key(name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join("; ")))
        }
    }
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
