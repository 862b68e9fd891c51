//! Named parameter storage and per-forward-pass binding into a [`Graph`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter tensors in insertion order, each with a unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::State(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of `id`, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::Dimension {
                op: "set_data",
                left: t.shape().to_vec(),
                right: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Gradients indexed by [`ParamId`]; `None` where a parameter received none.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self(vec![None; n])
    }

    /// Zero gradients for every parameter of `store`.
    pub fn zeros(store: &ParamStore) -> Self {
        Self(store.tensors.iter().map(|t| Some(vec![0.0; t.numel()])).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.0[id.0] = Some(g);
    }

    /// `self += other`, allocating where `self` has no entry yet.
    pub fn accumulate(&mut self, other: &Grads) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// A graph plus the mapping from parameters to the leaves they were bound to.
///
/// Parameters are bound lazily on first use; only those marked trainable
/// become gradient-tracking leaves.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'a> Session<'a> {
    /// Every parameter tracks gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, &vec![true; store.len()])
    }

    /// No parameter tracks gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, &vec![false; store.len()])
    }

    /// Only parameters with `trainable[id] == true` track gradients.
    pub fn with_trainable(store: &'a ParamStore, trainable: &[bool]) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: trainable.to_vec(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable[id.0] {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Back-propagates `loss` and collects gradients of bound trainable
    /// parameters.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.graph.backward(loss)?;
        let mut grads = Grads::empty(self.store.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.graph.grad(*v) {
                    grads.0[i] = Some(g.to_vec());
                }
            }
        }
        Ok(grads)
    }
}

/// Builds `"{prefix}.{suffix}"`.
pub(crate) fn join(prefix: &str, suffix: &str) -> String {
    if prefix.is_empty() {
        return suffix.to_string();
    }
    let mut s = String::with_capacity(prefix.len() + suffix.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(suffix);
    s
}
