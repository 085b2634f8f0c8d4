//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs carry gradient tracking.
//! Values are held in [`Var`] handles; when nothing upstream requires a
//! gradient no node is recorded and intermediate values are dropped as soon
//! as their handles go out of scope, so inference on large inputs does not
//! retain the whole activation history.

mod conv;
mod elementwise;
mod linear;
mod norm;
mod reduce;
mod shape;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use elementwise::{BinaryOp, UnaryOp};
pub(crate) use elementwise::softplus;
pub use conv::conv_out_len;
pub use norm::{BatchNormStats, NormMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Gradient of a node's output, mapped to one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
    tape: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// True when this value participates in gradient computation.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = (*self.value).clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

/// Ordered record of executed operations.
pub struct Tape {
    id: usize,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Register an input. It is tracked iff `tensor.requires_grad` and the
    /// tape records gradients.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        let track = tensor.requires_grad && self.grad_enabled;
        let node = if track {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: "leaf",
                inputs: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            value: Rc::new(tensor),
            node,
            tape: self.id,
        })
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn check_inputs(&self, inputs: &[&Var]) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Graph(
                "tape already consumed by backward; start a new forward pass".into(),
            ));
        }
        for v in inputs {
            if v.tape != self.id {
                return Err(Error::Graph("value belongs to a different tape".into()));
            }
        }
        Ok(())
    }

    /// Whether an op over `inputs` will be recorded.
    pub(crate) fn needs_grad(&self, inputs: &[&Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| v.node.is_some())
    }

    /// Append an executed op. `backward` is only kept when some input is tracked.
    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[&Var],
        out: Tensor,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        self.check_inputs(inputs)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        let node = match backward {
            Some(bw) if self.needs_grad(inputs) => {
                let mut nodes = self.nodes.borrow_mut();
                nodes.push(Node {
                    op,
                    inputs: inputs.iter().map(|v| v.node).collect(),
                    backward: Some(bw),
                });
                Some(nodes.len() - 1)
            }
            _ => None,
        };
        Ok(Var {
            value: Rc::new(out),
            node,
            tape: self.id,
        })
    }

    /// Reverse pass from a scalar loss. Consumes the recorded graph.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::Graph("loss was not produced on this tape".into()));
        }
        let Some(root) = loss.node else {
            return Err(Error::Graph(
                "loss is not connected to any tracked input".into(),
            ));
        };
        if loss.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Graph(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=root).rev() {
            let node = &mut nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            match node.backward.take() {
                None => {
                    leaves.insert(idx, g);
                }
                Some(bw) => {
                    let input_grads = bw(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (slot, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(target), Some(ig)) = (slot, ig) else { continue };
                        if !ig.iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFinite {
                                op: format!("backward of {}", node.op),
                            });
                        }
                        match &mut grads[*target] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a += b;
                                }
                            }
                            empty @ None => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when it is untracked or unreachable from the loss.
    pub fn get(&self, var: &Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        let g = self.leaves.get(&var.node?)?;
        Some(Tensor::from_parts(var.shape().to_vec(), g.clone()))
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
