//! A small Wengert tape. Forward calls append nodes holding their values;
//! [`Tape::backward`] replays them in reverse and accumulates adjoints.
//!
//! Only the ops the reconstruction network needs are provided, plus a hook
//! for linear ops whose adjoint is supplied by the caller.

use crate::error::{Error, Result};
use crate::ops::{self, Precision};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Adjoint of a caller-supplied linear map, used by [`Tape::linear`].
pub trait LinearAdjoint {
    fn adjoint(&self, upstream: &Tensor) -> Result<Tensor>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        pad: usize,
        precision: Precision,
    },
    Relu(Var),
    Add(Var, Var),
    Affine { context: Var, weight: Var, bias: Var },
    Reshape(Var),
    Linear { input: Var, adjoint: Box<dyn LinearAdjoint> },
    L2Loss { pred: Var, target: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the loss with respect to every leaf that requires a gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        self.conv2d_with(input, kernel, pad, Precision::F64)
    }

    /// [`Tape::conv2d`] with the GEMM precision used forward and backward.
    pub fn conv2d_with(&mut self, input: Var, kernel: Var, pad: usize, precision: Precision) -> Result<Var> {
        let out = ops::conv2d_with(self.value(input), self.value(kernel), pad, precision)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                pad,
                precision,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn affine(&mut self, context: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::affine(self.value(context), self.value(weight), self.value(bias))?;
        let rg = self.rg(context) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Affine {
                context,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Records an op whose forward value was computed by the caller and whose
    /// derivative with respect to `input` is the (affine part's) adjoint given.
    pub fn linear(&mut self, input: Var, value: Tensor, adjoint: Box<dyn LinearAdjoint>) -> Var {
        let rg = self.rg(input);
        self.push(value, Op::Linear { input, adjoint }, rg)
    }

    /// Scalar loss node holding `[l2_loss(pred, target)]`.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = ops::l2_loss(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::L2Loss { pred, target },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            let mut send = |v: Var, g: Tensor| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    pad,
                    precision,
                } => {
                    let (gi, gk) = ops::conv2d_backward_with(
                        &up,
                        self.value(*input),
                        self.value(*kernel),
                        *pad,
                        self.rg(*input),
                        self.rg(*kernel),
                        *precision,
                    )?;
                    if let Some(g) = gi {
                        send(*input, g);
                    }
                    if let Some(g) = gk {
                        send(*kernel, g);
                    }
                }
                Op::Relu(input) => send(*input, ops::relu_backward(&up, self.value(*input))?),
                Op::Add(a, b) => {
                    send(*a, up.clone());
                    send(*b, up);
                }
                Op::Affine {
                    context,
                    weight,
                    bias,
                } => {
                    let g = ops::affine_backward(
                        &up,
                        self.value(*context),
                        self.value(*weight),
                        self.value(*bias),
                    )?;
                    send(*context, g.context);
                    send(*weight, g.weight);
                    send(*bias, g.bias);
                }
                Op::Reshape(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    send(*input, up.reshape(&shape)?);
                }
                Op::Linear { input, adjoint } => send(*input, adjoint.adjoint(&up)?),
                Op::L2Loss { pred, target } => {
                    let s = up.data()[0];
                    let gp = ops::l2_loss_backward(self.value(*pred), self.value(*target), s)?;
                    send(*target, gp.scale(-1.0));
                    send(*pred, gp);
                }
            }
        }
        // Intermediate adjoints were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }
}
