use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Replace a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{name}` is {:?}, got {:?}", self.tensors[id.0].shape(), t.shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Put every tensor on the tape, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Gradients of the bound parameters after `g.backward`, zeros where
    /// a parameter did not contribute.
    pub fn grads(&self, g: &Graph<S>, bound: &Bound) -> Vec<Tensor<S>> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles of a [`ParamStore`], aligned with its ids.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap handles created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
