use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Gradient rule of a recorded operation: receives the output gradient and
/// a mask of which parents need a gradient, returns one entry per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the tape is always
/// topologically sorted. A tape is meant for one forward/backward pass on
/// a single thread; build a fresh one for every step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; it participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&self, mut value: Tensor) -> Var<'_> {
        let requires_grad = value.requires_grad();
        value.zero_grad();
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, mut value: Tensor) -> Var<'_> {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Forward values are left intact.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // interior gradients are not kept; leaves keep theirs
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        let leaf_mask = nodes
            .iter()
            .map(|n| n.parents.is_empty() && n.requires_grad)
            .collect::<Vec<_>>();
        for (g, keep) in grads.iter_mut().zip(leaf_mask) {
            if !keep {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf variable; `None` when the leaf does not require
    /// a gradient or the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let value = var.value();
        if !var.tape.requires_grad_of(var.id) {
            return None;
        }
        let data = self
            .grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        Some(Tensor::new(value.shape(), data).expect("gradient shape"))
    }

    pub(crate) fn raw(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
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
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Copy of the value as a tensor that no longer tracks the tape.
    pub fn detach(&self) -> Tensor {
        let mut t = (*self.value()).clone();
        t.set_requires_grad(false);
        t
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
