use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::tensor::Tensor;

/// Backward rule: `(grad of output, parent values, which parents need a grad)`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Append-only tape. Node ids are a topological order, so the backward pass
/// is a single reverse sweep.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
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

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an operation. The backward rule is dropped when no parent
    /// needs a gradient, which also frees whatever it captured.
    pub(crate) fn op<'g>(&'g self, parents: &[Var<'g, T>], value: Tensor<T>, backward: BackwardFn<T>) -> Var<'g, T> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar (or any) output, seeded with ones.
    pub fn backward(&self, output: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].requires_grad {
            return Grads { grads };
        }
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &parent_values, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// First element; meant for `[1]` loss tensors.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_shared(self.value(), false)
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Grads<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}
