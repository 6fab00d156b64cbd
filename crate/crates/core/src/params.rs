//! Named parameter storage and its binding into a forward graph.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// All learnable tensors of a model, keyed by dotted name. Iteration order is
/// the sorted name order, which fixes checkpoint layout and update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor.with_requires_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
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

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Binds parameters into `graph` as tracked leaves (for training).
    pub fn bind<'g, 's>(&'s self, graph: &'g Graph) -> Binder<'g, 's> {
        Binder::new(graph, self, true)
    }

    /// Binds parameters as untracked constants (for inference).
    pub fn bind_frozen<'g, 's>(&'s self, graph: &'g Graph) -> Binder<'g, 's> {
        Binder::new(graph, self, false)
    }
}

/// Lazily lifts store tensors into a graph, once per name.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> Binder<'g, 's> {
    fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)?
        } else {
            self.graph.constant(t)?
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var<'g>> {
        Ok(self.graph.constant(t)?)
    }

    /// Makes `name` resolve to an existing graph value instead of the store
    /// tensor. Used to route external inputs (e.g. gradient checks) through a
    /// module's parameters.
    pub fn bind_var(&self, name: &str, var: Var<'g>) -> Result<()> {
        if var.shape() != self.store.get(name)?.shape() {
            return Err(crate::error::contract(format!(
                "{name}: bound value has the wrong shape"
            )));
        }
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(())
    }

    /// Names of parameters touched by the forward pass so far.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Gradients of every bound, tracked parameter, keyed by name.
    pub fn named_grads(&self, grads: &Gradients) -> NamedGrads {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// Per-parameter gradient buffers from one backward pass.
pub type NamedGrads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    /// Adds `scale · g` into each named parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &NamedGrads, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            self.get_mut(name)?.accumulate_grad(&scaled)?;
        }
        Ok(())
    }
}

/// Deterministic parameter initializers.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let rng = &mut *self.rng;
        Ok(Tensor::from_fn(shape, |_| {
            rng.random_range(-bound..=bound)
        })?)
    }

    /// Glorot-uniform for a `fan_in → fan_out` map.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He-uniform for ReLU stacks.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binder_reuses_leaf_and_accumulates_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let g = Graph::new();
        let b = store.bind(&g);
        let w1 = b.param("w").unwrap();
        let w2 = b.param("w").unwrap();
        assert_eq!(w1.id(), w2.id());
        let loss = w1.mul(w2).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(matches!(b.param("nope"), Err(Error::MissingParam(_))));
        let named = b.named_grads(&grads);
        drop(b);
        store.accumulate_grads(&named, 0.5).unwrap();
        store.accumulate_grads(&named, 0.5).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_binding_is_untracked() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[1]).unwrap());
        let g = Graph::new();
        assert!(!store.bind_frozen(&g).param("w").unwrap().is_tracked());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Init::new(&mut r1).xavier(&[4, 4], 4, 4).unwrap();
        let b = Init::new(&mut r2).xavier(&[4, 4], 4, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= (6.0f64 / 8.0).sqrt()));
    }
}
