//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters enter the graph through [`Graph::param`] under a fully
//! qualified name, and [`Graph::backward`] returns their gradients keyed by
//! that name. [`Graph::detach`] cuts the tape: the returned variable is a
//! fresh constant, so nothing upstream of it can receive gradient.

mod conv;
mod norm;
mod ops;

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use norm::BnBuffers;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) struct BackwardArgs<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, usize>,
    param_names: HashMap<usize, String>,
    grad_enabled: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients<T> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm of the gradient for `name`; zero when the parameter got none.
    pub fn norm(&self, name: &str) -> f64 {
        self.map
            .get(name)
            .map(|g| g.sq_norm().as_f64().sqrt())
            .unwrap_or(0.0)
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.map.insert(name, grad);
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph for inference: values are computed but nothing is recorded.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: HashMap::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a named parameter. Repeated calls with the same name return
    /// the same variable, so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&idx) = self.params.get(name) {
            return Var(idx);
        }
        let v = self.push_leaf(value.clone(), self.grad_enabled);
        self.params.insert(name.to_string(), v.0);
        self.param_names.insert(v.0, name.to_string());
        v
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut out = Gradients::default();
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let args = BackwardArgs {
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    grad: &g,
                };
                let parent_grads = bw(&args);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if let Some(name) = self.param_names.get(&i) {
                out.map.insert(name.clone(), g);
            }
        }
        out
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences against the tape, used by the op tests.
    use super::*;

    /// Builds a scalar loss from input leaves registered as params `x0`, `x1`, ...
    pub fn check<F>(inputs: &[Tensor<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |xs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::inference();
            let vars: Vec<Var> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| g.param(&format!("x{i}"), x))
                .collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| g.param(&format!("x{i}"), x))
            .collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (i, x) in inputs.iter().enumerate() {
            let name = format!("x{i}");
            let analytic = grads
                .get(&name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()));
            for j in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let scale = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() <= tol * scale,
                    "grad mismatch for {name}[{j}]: analytic {a}, numeric {fd}"
                );
            }
        }
    }
}
