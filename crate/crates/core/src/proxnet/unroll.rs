//! The unrolled reconstruction as a differentiable computation.

use rand_chacha::ChaCha8Rng;

use super::tape::{AffineStep, Tape, Var};
use super::{ArchSpec, ConvParams, NetWeights, ProxParams, Tensor};
use crate::dipole::{check_measurements, LinearOperator};
use crate::error::{QsmError, Result};
use crate::solver::data_consistency_step_with;
use crate::volume::{GridSpec, RealVolume};

/// The data-consistency update `x − (α/L) Σ Φₗᴴ(Φₗx − yₗ)` over any stack
/// of self-adjoint operators.
pub struct DataConsistency<'a, A: LinearOperator> {
    ops: &'a [A],
    ys: &'a [RealVolume],
    alpha: f64,
}

impl<'a, A: LinearOperator> DataConsistency<'a, A> {
    pub fn new(ops: &'a [A], ys: &'a [RealVolume], alpha: f64) -> Result<Self> {
        check_measurements(ops, ys)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(QsmError::InvalidConfig(format!(
                "step size must be positive, got {alpha}"
            )));
        }
        Ok(DataConsistency { ops, ys, alpha })
    }
}

impl<A: LinearOperator> AffineStep for DataConsistency<'_, A> {
    fn grid(&self) -> &GridSpec {
        self.ops[0].grid()
    }

    fn apply(&self, x: &RealVolume) -> Result<RealVolume> {
        data_consistency_step_with(self.ops, self.ys, x, self.alpha)
    }

    fn linear_adjoint(&self, g: &RealVolume) -> Result<RealVolume> {
        let mut acc = RealVolume::zeros(*g.grid());
        for op in self.ops {
            acc = acc.add(&op.normal(g)?)?;
        }
        g.lincomb(1.0, &acc, -self.alpha / self.ops.len() as f64)
    }
}

/// Loss, prediction and gradients of one unrolled pass.
#[derive(Clone, Debug)]
pub struct UnrolledGradients {
    pub loss: f64,
    pub prediction: RealVolume,
    /// Same layout as [`ProxParams::sets`].
    pub params: Vec<NetWeights>,
    /// Gradient with respect to the initial iterate.
    pub initial: RealVolume,
}

struct LayerVars {
    weight: Var,
    bias: Var,
}

fn push_weights(tape: &mut Tape<'_>, w: &NetWeights) -> Vec<LayerVars> {
    w.layers
        .iter()
        .map(|l| LayerVars {
            weight: tape.leaf(Tensor::from_data(1, [l.weight.len(), 1, 1], l.weight.clone())),
            bias: tape.leaf(Tensor::from_data(1, [l.bias.len(), 1, 1], l.bias.clone())),
        })
        .collect()
}

fn network_on_tape(
    tape: &mut Tape<'_>,
    arch: &ArchSpec,
    vars: &[LayerVars],
    z: Var,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let shapes = arch.conv_shapes();
    let act = arch.activation;
    let conv =
        |tape: &mut Tape<'_>, x: Var, layer: usize| tape.conv3d(x, vars[layer].weight, vars[layer].bias, shapes[layer]);

    let mut h = conv(tape, z, 0)?;
    for b in 0..arch.blocks {
        let t = tape.activation(h, act)?;
        let t = conv(tape, t, 1 + 2 * b)?;
        let mut t = tape.activation(t, act)?;
        if let Some(rng) = dropout.as_deref_mut() {
            if arch.dropout_rate > 0.0 {
                t = tape.dropout(t, arch.dropout_rate, rng)?;
            }
        }
        let t = conv(tape, t, 2 + 2 * b)?;
        h = tape.add(h, t)?;
    }
    let t = tape.activation(h, act)?;
    let out = conv(tape, t, shapes.len() - 1)?;
    tape.add(z, out)
}

/// Runs `iterations` unrolled updates `x ← net(step(x))` from `initial`
/// (zero when absent), scores the result with `Σ (x − target)²`, and
/// back-propagates through every step. Passing `dropout` enables training
/// mode dropout drawn from that generator.
pub fn unrolled_loss_and_grad(
    params: &ProxParams,
    step: &dyn AffineStep,
    target: &RealVolume,
    iterations: usize,
    initial: Option<&RealVolume>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<UnrolledGradients> {
    if iterations == 0 {
        return Err(QsmError::InvalidConfig(
            "unrolled network needs at least one iteration".into(),
        ));
    }
    let grid = *step.grid();
    grid.ensure_same(target.grid())?;
    let dims = grid.dims;
    let mut dropout = dropout;

    let mut tape = Tape::new();
    let sets: Vec<Vec<LayerVars>> = params.sets.iter().map(|w| push_weights(&mut tape, w)).collect();
    let x0 = match initial {
        Some(v) => {
            grid.ensure_same(v.grid())?;
            v.data().to_vec()
        }
        None => vec![0.0; grid.len()],
    };
    let x0 = tape.leaf(Tensor::from_data(1, dims, x0));

    let mut x = x0;
    for i in 0..iterations {
        let set = if params.shared_across_iterations { 0 } else { i };
        let vars = sets.get(set).ok_or_else(|| {
            QsmError::InvalidConfig(format!(
                "per-iteration parameters cover {} iterations, {} requested",
                params.sets.len(),
                iterations
            ))
        })?;
        let z = tape.affine_step(x, step)?;
        x = network_on_tape(&mut tape, &params.arch, vars, z, dropout.as_deref_mut())?;
    }
    let prediction = RealVolume::new(grid, tape.value(x).data().to_vec())
        .map_err(|_| QsmError::NonFinite("unrolled prediction".into()))?;
    let target_t = Tensor::from_data(1, dims, target.data().to_vec());
    let loss_var = tape.squared_error(x, &target_t)?;
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(QsmError::NonFinite("training loss".into()));
    }

    let mut grads = tape.backward(loss_var)?;
    let mut take = |v: Var, len: usize| -> Vec<f64> { grads.take(v).map(|t| t.data).unwrap_or_else(|| vec![0.0; len]) };
    let param_grads = sets
        .iter()
        .zip(&params.sets)
        .map(|(vars, w)| NetWeights {
            layers: vars
                .iter()
                .zip(&w.layers)
                .map(|(v, l)| ConvParams {
                    weight: take(v.weight, l.weight.len()),
                    bias: take(v.bias, l.bias.len()),
                })
                .collect(),
        })
        .collect();
    let initial = RealVolume::new(grid, take(x0, grid.len()))?;
    Ok(UnrolledGradients {
        loss,
        prediction,
        params: param_grads,
        initial,
    })
}
