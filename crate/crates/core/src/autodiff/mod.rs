//! Reverse-mode automatic differentiation on a per-evaluation tape.
//!
//! A [`Graph`] records every intermediate [`Tensor`] together with a closure that
//! maps the output gradient to parent gradients. Graphs are built fresh for each
//! forward pass and dropped afterwards; parameters enter as leaves through
//! [`Graph::param`], which keeps the name so gradients can be routed back to the
//! [`ParamStore`].

mod conv;
mod ops;

use std::collections::HashMap;

pub use conv::conv_out_size;
pub use ops::softmax_rows;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps `(grad_out, parent values, own value)` to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that collects a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a derived value. The node requires a gradient iff any parent does.
    pub fn op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        let backward = requires_grad.then_some(backward);
        self.push(value, parents, backward, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagate from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.nodes[out.0].value.numel(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.nodes[out.0].value.shape(), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep leaf gradients, drop intermediate ones
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        Gradients { grads, params }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter that was used, sorted by name.
    /// Parameters that were looked up but not reached get an all-zero gradient.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = match self.get(*v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(store.get(name).expect("param exists").shape()),
                };
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let x2 = g.param(&store, "x").unwrap();
        assert_eq!(x, x2);
        let y = g.mul(x, x2);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0), false).unwrap();
        store.insert("x", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.param(&store, "x").unwrap();
        let y = g.mul(w, x);
        let grads = g.backward(y);
        assert!(grads.get(w).is_none());
        let pg = grads.param_grads(&store);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, "x");
        assert_eq!(pg[0].1.item(), 2.0);
    }
}
