//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Nodes are appended,
//! so every input id precedes its consumer and a single reverse sweep visits
//! each node once.
//!
//! ```
//! use glassnorm::autodiff::Tape;
//! use glassnorm::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y);
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gemm;
pub mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub(crate) use gemm::gemm;
pub(crate) use ops::bchw;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module. Receives the input
/// values, the output value and the output gradient; returns one gradient
/// per input (`None` for inputs that need none).
pub type CustomBackward =
    Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape and the nodes on it belong to one worker; parallel work uses
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Records an op whose backward rule is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            value,
            requires_grad,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Propagates d`output`/d(node) to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`];
    /// interior gradients are cleared after each sweep so a repeated call
    /// adds exactly one more copy to the leaves.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(shape.to_vec()));
        }
        if !self.requires_grad(output) {
            return Ok(());
        }
        self.accumulate(output, vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_op(i, &g);
            for (var, cg) in contributions {
                self.accumulate(var, cg);
            }
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }
}
