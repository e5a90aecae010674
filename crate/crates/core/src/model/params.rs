use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors. Gradients live in each tensor's grad buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        ParamId(self.names.len() - 1)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, n: usize) -> ParamId {
        self.add(name, Tensor::vector(vec![1.0; n]))
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        self.tensors[id.0].accumulate_grad(g);
    }

    /// Flat copy of all parameter values in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Lazily registers model parameters as leaves of one tape.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone().with_requires_grad(self.trainable);
        t.zero_grad();
        let v = tape.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    /// Releases the store borrow, keeping the `(param, leaf)` pairs bound so far.
    pub fn finish(self) -> Bindings {
        Bindings(
            self.vars
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
                .collect(),
        )
    }
}

/// Parameter-to-leaf mapping of one finished forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings(pub Vec<(ParamId, Var)>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }

    /// Adds the gradients accumulated on `tape` into the store, scaled by `weight`.
    pub fn collect_grads(&self, tape: &Tape, store: &mut ParamStore, weight: f64) {
        for &(id, v) in &self.0 {
            if let Some(g) = tape.grad(v) {
                if weight == 1.0 {
                    store.accumulate_grad(id, g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
                    store.accumulate_grad(id, &scaled);
                }
            }
        }
    }
}
