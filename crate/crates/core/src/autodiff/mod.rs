//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a computation tape: every operation appends a node holding
//! its output value and a record of how it was produced. [`Graph::backward`]
//! walks the tape in reverse recording order, propagating gradients with the
//! per-operation rules in [`backward`]. Intermediate gradients are local to a
//! single backward pass; only leaves that require gradients keep theirs, and
//! those accumulate across passes.

mod backward;
mod ops;

pub use crate::kernels::PadMode;
pub use ops::CollapseMode;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation with everything its backward rule needs.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    BiasAdd {
        x: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GlobalAvg {
        x: Var,
        positions: usize,
        channels: usize,
    },
    AvgPool2x2 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Upsample2x {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        lq: usize,
        lk: usize,
        c: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Lift {
        feat: Var,
        probs: Var,
        h: usize,
        w: usize,
        d: usize,
        c: usize,
    },
    CollapseHeight {
        vol: Var,
        h: usize,
        w: usize,
        d: usize,
        c: usize,
        argmax: Option<Vec<usize>>,
    },
    Resample {
        x: Var,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        c: usize,
    },
    L2Normalize {
        x: Var,
        dim: usize,
        eps: T,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        classes: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Linear { .. } => "linear",
            Op::BiasAdd { .. } => "bias_add",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxAxis { .. } => "max_pool",
            Op::AvgAxis { .. } => "avg_pool",
            Op::GlobalAvg { .. } => "global_avg_pool",
            Op::AvgPool2x2 { .. } => "avg_pool2x2",
            Op::Upsample2x { .. } => "upsample2x",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Lift { .. } => "lift_to_3d",
            Op::CollapseHeight { .. } => "collapse_height",
            Op::Resample { .. } => "resample_bilinear",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: corrupts the backward rule of the named operation by
    /// scaling every gradient it emits by 1.1.
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        if needs_grad {
            tensor.zero_grad();
        }
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Records a leaf that accumulates gradients.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, if it tracks one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Attention weights saved by [`Graph::attention`], laid out
    /// `(heads, queries, keys)`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], [usize; 3])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs, heads, lq, lk, ..
            } => Some((probs.as_slice(), [*heads, *lq, *lk])),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from a scalar `root` back to every leaf that
    /// requires them. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(root).to_vec(),
                reason: "backward requires a scalar root".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&gy)?;
                continue;
            }
            let mut contributions = self.backward_node(i, &gy);
            if let Some(fault) = self.fault {
                if fault == self.nodes[i].op.name() {
                    for (_, g) in contributions.iter_mut() {
                        g.iter_mut().for_each(|x| *x *= T::of(1.1));
                    }
                }
            }
            for (v, g) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => crate::kernels::add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}
