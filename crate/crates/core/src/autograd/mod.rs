//! A small tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every op applied through [`Var`] handles together with a
//! closure computing the vector-Jacobian product for its parents. Ops run
//! eagerly; `backward` walks the tape in reverse creation order.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Real, Tensor};

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Arc::new(value), Vec::new(), false, None)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.insert(value, Vec::new(), self.record, None)
    }

    fn insert(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<Backward<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.insert(Arc::new(value), ids, true, Some(Box::new(backward)))
        } else {
            self.insert(Arc::new(value), Vec::new(), false, None)
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar output. Gradients of intermediate nodes are
    /// released once propagated; leaf gradients are returned.
    pub fn backward(&self, output: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let out = &nodes[output.id];
        assert_eq!(out.value.len(), 1, "backward needs a scalar output, got {:?}", out.value.shape());
        grads[output.id] = Some(Tensor::full(out.value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients indexed by graph node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a graph node.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn chw(&self) -> (usize, usize, usize) {
        self.graph.nodes.borrow()[self.id].value.chw()
    }

    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.item()
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = Arc::new(value);
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(Arc::new(value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| self.values[i].as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.values[i]))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, v.cast());
        }
        out
    }

    /// Binds the store to a graph; parameters become leaves on first use.
    pub fn bind<'g>(&'g self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            graph,
            store: self,
            vars: RefCell::new(vec![None; self.names.len()]),
        }
    }
}

pub struct Bound<'g, T: Real> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index.contains_key(name)
    }

    /// Panics if the parameter does not exist; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var<'g, T> {
        let i = *self
            .store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        let mut vars = self.vars.borrow_mut();
        *vars[i].get_or_insert_with(|| self.graph.leaf_shared(self.store.values[i].clone()))
    }

    /// Gradients aligned with the store order (`None` for unused parameters).
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}
