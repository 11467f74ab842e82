//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every node that needs one.

mod check;
mod ops;
mod params;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use check::{check_gradients, GradCheck};
pub use ops::Conv;
pub use params::{Adam, ParamGrads, ParamId, ParamStore, Parameter, Session};

type BackFn<T> = dyn Fn(&Tensor<T>, &[Rc<Tensor<T>>], &Tensor<T>) -> Vec<Option<Tensor<T>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Box<BackFn<T>>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        })
    }

    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[Rc<Tensor<T>>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.insert(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: needs_grad.then(|| Box::new(backward) as Box<BackFn<T>>),
            needs_grad,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of the scalar `loss` with respect to every node on its tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parents: Vec<Rc<Tensor<T>>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let pg = back(&g, &parents, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, pgrad) in node.parents.iter().zip(pg) {
                let Some(pgrad) = pgrad else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(pgrad.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pgrad),
                    slot @ None => *slot = Some(pgrad),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1., -2., 3., 0.5, 7., 1.]).unwrap());
        let loss = x.sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn squared_norm_gives_two_x() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_vec(&[4], vec![1., -2., 3., 0.25]).unwrap();
        let x = g.leaf(t.clone());
        let loss = x.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &t.map(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.leaf(Tensor::ones(&[3]));
        let loss = c.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
