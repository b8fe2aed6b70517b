use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Backward rule of one recorded op.
pub(crate) trait Backward<T: Float> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input (in input order). Entries for
    /// inputs with `needs_grad[i] == false` may be `None`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;

    /// Appends which piece of a piecewise op was taken (ReLU signs, argmax
    /// positions). Smooth ops append nothing.
    fn branch(&self, _inputs: &[Rc<Tensor<T>>], _out: &mut Vec<u64>) {}
}

pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs_grad: &'a [bool],
}

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

impl<T: Float> Node<T> {
    fn op_name(&self) -> &'static str {
        self.op.as_ref().map_or("leaf", |op| op.name())
    }
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// append order is a topological order of the graph.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
            param: None,
        })
    }

    /// The leaf for a learnable parameter. Repeated calls for the same
    /// parameter return the same node, so gradients of shared uses sum up.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push_node(Node {
            value: Rc::new(store.value(id).clone()),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
            param: Some(id),
        });
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    pub(crate) fn push(&self, value: Tensor<T>, inputs: &[Var<'_, T>], op: impl Backward<T> + 'static) -> Var<'_, T> {
        let (requires_grad, input_ids) = {
            let nodes = self.nodes.borrow();
            let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
            (ids.iter().any(|&i| nodes[i].requires_grad), ids)
        };
        if cfg!(debug_assertions) && !value.all_finite() {
            let nodes = self.nodes.borrow();
            let inputs_finite = input_ids.iter().all(|&i| nodes[i].value.all_finite());
            debug_assert!(
                !inputs_finite,
                "op `{}` produced non-finite output from finite inputs",
                op.name()
            );
        }
        self.push_node(Node {
            value: Rc::new(value),
            inputs: input_ids,
            op: Some(Box::new(op)),
            requires_grad,
            param: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// The first recorded op whose output contains NaN/Inf while all of its
    /// inputs are finite, as `(node index, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, node)| {
            let bad = !node.value.all_finite() && node.inputs.iter().all(|&j| nodes[j].value.all_finite());
            bad.then(|| (i, node.op_name()))
        })
    }

    /// Concatenated branch choices of every piecewise op on the tape. Two
    /// forward passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            if let Some(op) = &node.op {
                let inputs: Vec<_> = node.inputs.iter().map(|&j| Rc::clone(&nodes[j].value)).collect();
                op.branch(&inputs, &mut out);
            }
        }
        out
    }

    /// Reverse-mode sweep from a scalar `loss`. Every node is visited at most
    /// once, in reverse append order.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> = node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
            let needs_grad: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let contributions = op.backward(&BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs_grad: &needs_grad,
            });
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op `{}`", op.name());
            for ((&input, contrib), needs) in node.inputs.iter().zip(contributions).zip(needs_grad) {
                let Some(contrib) = contrib else { continue };
                if !needs {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[input].value.shape(),
                    "gradient shape from op `{}`",
                    op.name()
                );
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Intermediate grads are dropped as soon as they are consumed;
            // only leaves keep theirs.
        }

        // Leaves reachable from the loss that received no contribution still
        // get an (all-zero) gradient buffer.
        let mut reachable = vec![false; nodes.len()];
        reachable[loss.id] = true;
        for id in (0..=loss.id).rev() {
            if reachable[id] && nodes[id].requires_grad {
                for &i in &nodes[id].inputs {
                    reachable[i] = true;
                }
            }
        }
        let mut params = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if reachable[id] && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if let (Some(pid), Some(_)) = (node.param, grads[id].as_ref()) {
                params.push((pid, id));
            }
        }
        Ok(Grads { grads, params })
    }
}

/// Gradients of leaf nodes after [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Grads<T> {
    /// Gradient of a leaf created with [`Tape::input`] or [`Tape::param`].
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Float> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
