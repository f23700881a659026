//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced while a model runs. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and returns
//! gradients for every leaf created with [`Graph::variable`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::Tensor;

/// A differentiable operation. `forward` may stash whatever it needs for the
/// backward pass on `self`.
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor;

    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, op: Option<Box<dyn Op>>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// A constant: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient [`backward`](Self::backward) will report.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    pub fn apply<'g>(&'g self, mut op: impl Op + 'static, inputs: &[Var<'g>]) -> Var<'g> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| nodes[v.id].value.as_ref()).collect();
            let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (op.forward(&values), requires_grad)
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        if requires_grad {
            self.push(value, ids, Some(Box::new(op)), true)
        } else {
            // Nothing upstream is differentiable: record the result as a constant
            // so the op (and anything it cached) can be dropped now.
            self.push(value, Vec::new(), None, false)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-mode sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let root_shape = nodes[root.id].value.shape().to_vec();
        grads[root.id] = Some(Tensor::full(root_shape, 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
            assert_eq!(parent_grads.len(), node.inputs.len(), "{}: wrong gradient count", op.name());
            for ((&pid, need), pg) in node.inputs.iter().zip(&needs).zip(parent_grads) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                assert_eq!(
                    pg.shape(),
                    nodes[pid].value.shape(),
                    "{}: gradient shape mismatch",
                    op.name()
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Keep only leaf gradients.
        for (id, node) in nodes.iter().enumerate() {
            if node.op.is_some() {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

/// Gradients of every variable leaf after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not influence the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros of the leaf's shape when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.dim(axis)
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    /// A constant copy of this value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g> {
        let value = (*self.value()).clone();
        self.graph.constant(value)
    }
}
