//! A small reverse-mode differentiation tape over whole tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep is a single reverse pass.
//! The operation set is exactly what the unrolled reconstruction needs:
//! convolution, pointwise activation, addition, dropout masking, the affine
//! data-consistency step, and the squared-error loss.

use rand::Rng;

use super::tensor::{conv3d_backward_input, conv3d_backward_params, conv3d_forward, Activation, ConvShape, Tensor};
use crate::error::{QsmError, Result};
use crate::volume::{GridSpec, RealVolume};

/// An affine map `x ↦ Mx + c` with self-adjoint `M`.
pub trait AffineStep {
    fn grid(&self) -> &GridSpec;

    fn apply(&self, x: &RealVolume) -> Result<RealVolume>;

    /// `Mᵀg` (`= Mg`).
    fn linear_adjoint(&self, g: &RealVolume) -> Result<RealVolume>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        shape: ConvShape,
    },
    Act {
        input: Var,
        act: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    Affine {
        input: Var,
        step: &'a dyn AffineStep,
    },
    SquaredError {
        input: Var,
        target: Tensor,
    },
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar output with respect to every node that needs one.
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

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node<'a>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| QsmError::Tape(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, shape: ConvShape) -> Result<Var> {
        let x = &self.check(input)?.value;
        let w = &self.check(weight)?.value;
        let b = &self.check(bias)?.value;
        if x.channels != shape.in_channels || w.data.len() != shape.weight_len() || b.data.len() != shape.out_channels {
            return Err(QsmError::Tape(format!(
                "convolution {shape:?} applied to {} channels with {} weights and {} biases",
                x.channels,
                w.data.len(),
                b.data.len()
            )));
        }
        let out = conv3d_forward(x, &w.data, &b.data, shape);
        let rg = self.grad_flag(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                shape,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        let out = act.apply(&self.check(input)?.value);
        let rg = self.grad_flag(&[input]);
        Ok(self.push(out, Op::Act { input, act }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if !ta.same_shape(tb) {
            return Err(QsmError::Tape("adding tensors of different shapes".into()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1/(1 − rate)`.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        let x = &self.check(input)?.value;
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.data.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let out = Tensor {
            channels: x.channels,
            dims: x.dims,
            data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let rg = self.grad_flag(&[input]);
        Ok(self.push(out, Op::Mask { input, mask }, rg))
    }

    pub fn affine_step(&mut self, input: Var, step: &'a dyn AffineStep) -> Result<Var> {
        let x = &self.check(input)?.value;
        if x.channels != 1 {
            return Err(QsmError::Tape("data-consistency input must have one channel".into()));
        }
        let vol = RealVolume::new(*step.grid(), x.data.clone())?;
        let out = step.apply(&vol)?;
        let t = Tensor::from_data(1, x.dims, out.into_data());
        let rg = self.grad_flag(&[input]);
        Ok(self.push(t, Op::Affine { input, step }, rg))
    }

    /// `Σ (input − target)²`.
    pub fn squared_error(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        let x = &self.check(input)?.value;
        if !x.same_shape(target) {
            return Err(QsmError::Tape("loss target shape differs from prediction".into()));
        }
        let loss: f64 = x.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.grad_flag(&[input]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                input,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if out.value.data.len() != 1 {
            return Err(QsmError::Tape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    input,
                    weight,
                    bias,
                    shape,
                } => {
                    let w = &self.nodes[weight.0].value;
                    if needs(*input) {
                        accumulate(&mut grads, *input, conv3d_backward_input(&g, &w.data, *shape));
                    }
                    if needs(*weight) || needs(*bias) {
                        let (gw, gb) = conv3d_backward_params(&g, &self.nodes[input.0].value, *shape);
                        if needs(*weight) {
                            accumulate(
                                &mut grads,
                                *weight,
                                Tensor {
                                    data: gw,
                                    ..w.clone_shape()
                                },
                            );
                        }
                        if needs(*bias) {
                            let b = &self.nodes[bias.0].value;
                            accumulate(
                                &mut grads,
                                *bias,
                                Tensor {
                                    data: gb,
                                    ..b.clone_shape()
                                },
                            );
                        }
                    }
                }
                Op::Act { input, act } => {
                    let pre = &self.nodes[input.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&pre.data)
                        .map(|(gv, &p)| gv * act.derivative(p))
                        .collect();
                    accumulate(&mut grads, *input, Tensor { data, ..g });
                }
                Op::Add { a, b } => {
                    if needs(*a) && needs(*b) {
                        accumulate(&mut grads, *a, g.clone());
                        accumulate(&mut grads, *b, g);
                    } else if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    } else if needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mask { input, mask } => {
                    let data = g.data.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut grads, *input, Tensor { data, ..g });
                }
                Op::Affine { input, step } => {
                    let gv = RealVolume::new(*step.grid(), g.data)?;
                    let back = step.linear_adjoint(&gv)?;
                    accumulate(&mut grads, *input, Tensor::from_data(1, g.dims, back.into_data()));
                }
                Op::SquaredError { input, target } => {
                    let x = &self.nodes[input.0].value;
                    let s = 2.0 * g.data[0];
                    let data = x.data.iter().zip(&target.data).map(|(a, b)| s * (a - b)).collect();
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor {
                            data,
                            ..x.clone_shape()
                        },
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Tensor {
    /// Same shape, no data; for struct-update construction.
    fn clone_shape(&self) -> Tensor {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: Vec::new(),
        }
    }
}
