use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// A fresh graph is built for every forward pass; [`Graph::backward`]
/// walks it in reverse and returns gradients for the leaves.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
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

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        if requires_grad {
            self.push_node(value, ids, Some(backward), true)
        } else {
            self.push_node(value, ids, None, false)
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(
            root.value.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            root.value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves = BTreeMap::new();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.backward {
                None => {
                    leaves.insert(i, g);
                }
                Some(bw) => {
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
                    let parent_grads = bw(&g, &inputs, &node.value);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Copies the value into a gradient-free leaf.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }
}
