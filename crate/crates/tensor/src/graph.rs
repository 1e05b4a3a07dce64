use std::cell::RefCell;
use std::rc::Rc;

use crate::{Real, Tensor};

/// Receives the gradient of a node's output and scatters it into the
/// gradient buffers of the node's inputs.
pub(crate) type Backward<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

/// Recording tape. Node ids are assigned in creation order, which is a
/// topological order of the computation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
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

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    pub(crate) fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an operation. The backward closure is dropped when none of the
    /// parents needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Rc<Tensor<T>>,
        parents: &[usize],
        backward: Backward<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        assert!(std::ptr::eq(output.graph, self), "variable from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.numel(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![T::one()]);
        let flags: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.numel()).collect();
        for id in (0..=output.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads[..id],
                    flags: &flags,
                    sizes: &sizes,
                };
                backward(&grad, &mut sink);
            }
            grads[id] = Some(grad);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

/// Write access to the gradient buffers of nodes created before the one
/// being differentiated.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    flags: &'a [bool],
    sizes: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, id: usize) -> bool {
        self.flags[id]
    }

    /// Accumulation buffer for `id`, zero-initialised on first use.
    pub fn buf(&mut self, id: usize) -> &mut [T] {
        let n = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Add `g` elementwise into the gradient of `id`, if it wants one.
    pub fn add(&mut self, id: usize, g: &[T]) {
        if !self.wants(id) {
            return;
        }
        let buf = self.buf(id);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `var`; `None` when the output
    /// does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()))
    }

    /// Same as [`get`](Self::get) but returns zeros for unreached variables.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.push_leaf(self.value(), false)
    }
}
