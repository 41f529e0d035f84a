use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::RngCore;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Moves every tensor of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// A forward pass over a [`ParamStore`]: owns the graph and binds each
/// parameter to a leaf the first time a module asks for it.
pub struct Session<'p> {
    graph: Graph,
    params: &'p ParamStore,
    constants: RefCell<ParamStore>,
    bound: RefCell<BTreeMap<String, usize>>,
    frozen: Vec<String>,
    training: bool,
    rng: RefCell<Option<Box<dyn RngCore + 'p>>>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            constants: RefCell::new(ParamStore::new()),
            bound: RefCell::new(BTreeMap::new()),
            frozen: Vec::new(),
            training: false,
            rng: RefCell::new(None),
        }
    }

    /// Parameters under any of these name prefixes become constants.
    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    /// Adds named tensors served by [`Session::param`] as constants, for
    /// modules that take part in the loss but are not being optimized.
    /// Names already present in the session's store are ignored.
    pub fn add_constants(&self, constants: ParamStore) {
        self.constants.borrow_mut().extend(constants);
    }

    /// Enables training-only behavior (dropout) driven by `rng`.
    pub fn training(mut self, rng: impl RngCore + 'p) -> Self {
        self.training = true;
        self.rng = RefCell::new(Some(Box::new(rng)));
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
            || (!self.params.contains(name) && self.constants.borrow().contains(name))
    }

    pub fn param(&self, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.bound.borrow().get(name) {
            return Ok(Var {
                graph: &self.graph,
                id,
            });
        }
        let value = match self.params.get(name) {
            Some(t) => t.clone(),
            None => self
                .constants
                .borrow()
                .get(name)
                .ok_or_else(|| TensorError::invalid("param", format!("missing parameter '{name}'")))?
                .clone(),
        };
        let var = if self.is_frozen(name) {
            self.graph.constant(value)
        } else {
            self.graph.leaf(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.graph.constant(value)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout<'s>(&'s self, x: Var<'s>, p: f64) -> Result<Var<'s>> {
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        let shape = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let rng = rng
            .as_mut()
            .ok_or_else(|| TensorError::invalid("dropout", "training session without rng"))?;
        let mask = Tensor::from_fn(&shape, |_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < p {
                0.0
            } else {
                keep
            }
        });
        x.mul(self.graph.constant(mask))
    }

    pub fn backward<'s>(&'s self, loss: Var<'s>) -> Gradients {
        self.graph.backward(loss)
    }

    /// Gradients of every bound, non-frozen parameter (zeros if unused by the loss).
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &id)| {
                let var = Var {
                    graph: &self.graph,
                    id,
                };
                (name.clone(), grads.get_or_zeros(var))
            })
            .collect()
    }

    /// Names of parameters touched by this pass.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}
