//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed operation in creation order, which is
//! a topological order. [`Graph::backward`] walks the tape in reverse,
//! accumulating gradients additively over fan-out. Each graph is
//! single-threaded; batch parallelism uses one graph per sample.

mod backward;
pub(crate) mod kernels;
mod ops;

use crate::tensor::{numel, Tensor};
use crate::{Real, Result, VilError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Silu,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Maximum,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    DivRows(Var, Var),
    SumAll(Var),
    MeanRows(Var),
    RowSum(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    CausalConv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    GroupedLinear(Var, Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PermuteRows(Var, Vec<usize>),
    MaskUpper(Var),
    Mlstm {
        q: Var,
        k: Var,
        v: Var,
        i_pre: Var,
        f_pre: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    /// Short operation name, used by fault injection and diagnostics.
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sigmoid => "sigmoid",
                Unary::LogSigmoid => "log_sigmoid",
                Unary::Silu => "silu",
                Unary::Abs => "abs",
            },
            Op::Binary(b, ..) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Maximum => "maximum",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::DivRows(..) => "div_rows",
            Op::SumAll(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::RowSum(..) => "row_sum",
            Op::Norm { .. } => "norm",
            Op::Conv2d { .. } => "conv2d_depthwise",
            Op::CausalConv1d { .. } => "causal_conv1d",
            Op::GroupedLinear(..) => "grouped_linear",
            Op::Reshape(..) => "reshape",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::PermuteRows(..) => "permute_rows",
            Op::MaskUpper(..) => "mask_upper",
            Op::Mlstm { .. } => "mlstm_parallel",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Test fixture: multiplies the input gradients produced by every node of
/// the named operation by `scale`, simulating a broken backward rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub scale: f64,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    macs: u64,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            macs: 0,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{} output", op.name());
        let requires_grad = match &op {
            Op::Leaf | Op::Constant => false,
            op => backward::inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let var = self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf);
        self.nodes[var.0].requires_grad = tensor.requires_grad;
        var
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(VilError::dim(format!(
                "constant of shape {shape:?} with {} elements",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Constant))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(vec![1], vec![value], Op::Constant)
    }

    /// Copy of `x` cut from the graph: same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Constant)
    }

    pub fn value(&self, x: Var) -> &[T] {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn tensor(&self, x: Var) -> Tensor<T> {
        let node = &self.nodes[x.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape invariant")
    }

    /// Gradient of the last backward pass with respect to `x`, if any
    /// reached it.
    pub fn grad(&self, x: Var) -> Option<&[T]> {
        self.grads[x.0].as_deref()
    }

    /// Order in which [`Graph::backward`] visits nodes for the given loss:
    /// every node reachable from it, in reverse creation order.
    pub fn backward_order(&self, loss: Var) -> Vec<Var> {
        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        let mut order = Vec::new();
        for idx in (0..=loss.0).rev() {
            if !reachable[idx] || !self.nodes[idx].requires_grad {
                continue;
            }
            order.push(Var(idx));
            for input in backward::inputs(&self.nodes[idx].op) {
                reachable[input.0] = true;
            }
        }
        order
    }

    /// Back-propagates from a scalar loss. Every `requires_grad` leaf
    /// reachable from `loss` ends up holding d(loss)/d(leaf).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(VilError::Usage(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(VilError::Usage(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for var in self.backward_order(loss) {
            let idx = var.0;
            let Some(g_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let scale = self
                .fault
                .filter(|f| f.op == node.op.name())
                .map(|f| T::lit(f.scale));
            backward::propagate(&self.nodes, idx, &g_out, &mut self.grads, scale);
            self.grads[idx] = Some(g_out);
        }
        Ok(())
    }
}
