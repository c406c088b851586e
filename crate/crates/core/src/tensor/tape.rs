use std::cell::RefCell;
use std::fmt;

use super::dense::Tensor;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Recorded primitive. Input fields are node ids on the owning tape; any
/// other payload is what the backward rule needs from the forward pass.
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, T),
    Sum(usize),
    MatMul {
        a: usize,
        w: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Narrow0 {
        x: usize,
        start: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        spec: Conv1dSpec,
        cols: Vec<T>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: usize,
        cdf: Vec<T>,
    },
    Softmax(usize),
    Dropout {
        x: usize,
        factors: Vec<T>,
    },
    StraightThrough(usize),
    Exp(usize),
    XLogX(usize),
    SumLast(usize),
    MeanRows(usize),
    RowCosine {
        a: usize,
        b: usize,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: usize,
        emb: usize,
        rows: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Narrow0 { .. } => "narrow0",
            Op::Conv1d { .. } => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax(..) => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::StraightThrough(..) => "straight_through",
            Op::Exp(..) => "exp",
            Op::XLogX(..) => "xlogx",
            Op::SumLast(..) => "sum_last",
            Op::MeanRows(..) => "mean_rows",
            Op::RowCosine { .. } => "row_cosine",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Stride, symmetric zero padding and channel groups of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub tracked: bool,
}

/// Append-only record of primitive applications for one forward pass.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, false)
    }

    pub(crate) fn push_node(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// The earliest recorded node holding a NaN or infinity, as `(id, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients across fan-out.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            super::ops::backward_rule(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of the leaves reached by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if it is untracked or not reached.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros when no path reaches it.
    pub fn wrt_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A tensor recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(
            f,
            "Var#{}({}, {:?})",
            self.id,
            node.op.name(),
            node.value.shape()
        )
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}
