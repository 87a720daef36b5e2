use std::cell::RefCell;

use super::graph::{Gradients, Graph, Var};
use super::{NnError, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies values from a store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        self.check_layout(other)?;
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// Polyak averaging: `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) -> Result<(), NnError> {
        self.check_layout(online)?;
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<(), NnError> {
        if self.names != other.names {
            return Err(NnError::Layout("parameter names differ".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.values.iter().zip(&other.values)) {
            if a.shape() != b.shape() {
                return Err(NnError::Layout(format!("{n}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    /// Replaces every tensor by name from `entries`; all names must be present.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<(), NnError> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| NnError::Layout(format!("missing tensor {name}")))?;
            if t.shape() != value.shape() {
                return Err(NnError::Layout(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.values().iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data().iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// A [`ParamStore`] bound to a graph. Leaves are created lazily the first
/// time a parameter is used, so one binding can be reused across calls.
pub struct Bound<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    leaves: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Bound<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self { graph, store, trainable, leaves: RefCell::new(vec![None; store.len()]) }
    }

    /// Binding whose parameters act as constants (no gradient flows to them).
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, false)
    }

    pub fn trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, true)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(v) = leaves[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.graph.input(value) } else { self.graph.constant(value) };
        leaves[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter (zero for unused or frozen ones).
    pub fn grads(&self, g: &Gradients) -> ParamGrads {
        let leaves = self.leaves.borrow();
        let grads = self
            .store
            .values()
            .iter()
            .zip(leaves.iter())
            .map(|(value, leaf)| {
                leaf.and_then(|v| g.get_id(v.id()).cloned()).unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect();
        ParamGrads { grads }
    }
}
