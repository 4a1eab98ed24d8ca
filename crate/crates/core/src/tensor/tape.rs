use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Tensor, TensorError};

/// Local vector-Jacobian product of one recorded operation.
///
/// Receives the gradient of the output and, per input, whether that input
/// needs a gradient. Returns one entry per input (`None` where skipped).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so the list is always a valid
/// topological order and the reverse sweep is a single backwards scan.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: impl Into<Rc<Tensor>>, requires_grad: bool) -> Var<'_> {
        self.push(value.into(), requires_grad, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The backward closure is only kept when at least one input needs a
    /// gradient; otherwise the output is recorded as a constant.
    pub fn record<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        let requires_grad = inputs.iter().any(|v| {
            debug_assert!(std::ptr::eq(v.tape, self), "mixing vars from different tapes");
            v.requires_grad()
        });
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward = requires_grad.then_some(backward);
        self.push(Rc::new(value), requires_grad, parents, backward)
    }

    fn push(&self, value: Rc<Tensor>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn backward_from(&self, root: usize) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root].value.shape().to_vec();
        if nodes[root].value.len() != 1 {
            return Err(TensorError::NotScalar(root_shape));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(&root_shape));

        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(backward) = &nodes[id].backward else {
                match &mut nodes[id].grad {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
                continue;
            };
            let needs: Vec<bool> = nodes[id].parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), needs.len());
            for (k, g) in parent_grads.into_iter().enumerate() {
                let p = nodes[id].parents[k];
                let Some(g) = g else { continue };
                if !needs[k] {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Reverse sweep from this scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self) -> Result<(), TensorError> {
        self.tape.backward_from(self.id)
    }
}
