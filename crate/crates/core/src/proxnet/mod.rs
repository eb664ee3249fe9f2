//! The learned proximal operator.
//!
//! A fully convolutional residual network maps a susceptibility estimate to
//! a refined estimate on the same grid:
//!
//! ```text
//! h ← lift(z)
//! repeat blocks:  h ← h + conv_b(dropout(act(conv_a(act(h)))))
//! out = z + proj(act(h))
//! ```
//!
//! `lift` maps one channel to `width`, `proj` maps back to one. The global
//! residual makes an all-zero network the identity.

mod io;
pub mod tape;
pub mod tensor;
mod train;
mod unroll;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::solver::{ProxFamily, ProximalMap};
use crate::volume::RealVolume;
pub use io::{load_params, load_params_expecting, params_from_bytes, params_to_bytes, save_params, PARAMS_MAGIC};
pub use tensor::{Activation, ConvShape, Tensor};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory, TrainPair};
pub use unroll::{unrolled_loss_and_grad, DataConsistency, UnrolledGradients};

/// Architecture of the proximal network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Number of residual blocks.
    pub blocks: usize,
    /// Channels inside the network.
    pub width: usize,
    /// Side of the cubic convolution kernels (odd).
    pub kernel: usize,
    pub activation: Activation,
    /// Dropout probability inside each block during training.
    pub dropout_rate: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            blocks: 4,
            width: 16,
            kernel: 3,
            activation: Activation::LeakyRelu,
            dropout_rate: 0.0,
        }
    }
}

impl ArchSpec {
    /// Two blocks of width eight; small enough to train on a CPU in minutes.
    pub fn toy() -> Self {
        ArchSpec {
            blocks: 2,
            width: 8,
            ..ArchSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 {
            return Err(QsmError::InvalidConfig(format!(
                "network needs at least one block and one channel, got {} blocks of width {}",
                self.blocks, self.width
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(QsmError::InvalidConfig(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(QsmError::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Layers in declaration order: lift, (conv_a, conv_b) per block, proj.
    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let k = self.kernel;
        let w = self.width;
        let mut shapes = vec![ConvShape {
            in_channels: 1,
            out_channels: w,
            kernel: k,
        }];
        for _ in 0..self.blocks {
            let inner = ConvShape {
                in_channels: w,
                out_channels: w,
                kernel: k,
            };
            shapes.push(inner);
            shapes.push(inner);
        }
        shapes.push(ConvShape {
            in_channels: w,
            out_channels: 1,
            kernel: k,
        });
        shapes
    }

    /// Distance in voxels over which an output depends on its input.
    pub fn receptive_radius(&self) -> usize {
        (self.kernel / 2) * (2 * self.blocks + 2)
    }
}

/// Weights and biases of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One full set of network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub layers: Vec<ConvParams>,
}

impl NetWeights {
    fn zeros(arch: &ArchSpec) -> Self {
        NetWeights {
            layers: arch
                .conv_shapes()
                .iter()
                .map(|s| ConvParams {
                    weight: vec![0.0; s.weight_len()],
                    bias: vec![0.0; s.out_channels],
                })
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Parameters `θ` of the learned proximal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxParams {
    pub arch: ArchSpec,
    /// One set shared by every unrolled iteration, or one set per iteration.
    pub shared_across_iterations: bool,
    pub sets: Vec<NetWeights>,
}

impl ProxParams {
    /// All weights zero: the identity proximal.
    pub fn zeros(arch: ArchSpec, shared_across_iterations: bool, iterations: usize) -> Result<Self> {
        arch.validate()?;
        let count = if shared_across_iterations { 1 } else { iterations.max(1) };
        let sets = (0..count).map(|_| NetWeights::zeros(&arch)).collect();
        Ok(ProxParams {
            arch,
            shared_across_iterations,
            sets,
        })
    }

    /// Fan-in scaled uniform weights, zero biases. The second convolution of
    /// every block and the output projection start at zero, so the initial
    /// network is the identity.
    pub fn init(arch: ArchSpec, shared_across_iterations: bool, iterations: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch, shared_across_iterations, iterations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = params.arch.conv_shapes();
        let last = shapes.len() - 1;
        for set in params.sets.iter_mut() {
            for (idx, (layer, shape)) in set.layers.iter_mut().zip(&shapes).enumerate() {
                let is_block_output = idx > 0 && idx < last && idx % 2 == 0;
                if idx == last || is_block_output {
                    continue;
                }
                let fan_in = (shape.in_channels * shape.kernel.pow(3)) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                layer.weight.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            }
        }
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.sets.is_empty() || (self.shared_across_iterations && self.sets.len() != 1) {
            return Err(QsmError::ArchMismatch(format!(
                "{} weight sets with shared_across_iterations = {}",
                self.sets.len(),
                self.shared_across_iterations
            )));
        }
        let shapes = self.arch.conv_shapes();
        for set in &self.sets {
            if set.layers.len() != shapes.len() {
                return Err(QsmError::ArchMismatch(format!(
                    "expected {} layers, found {}",
                    shapes.len(),
                    set.layers.len()
                )));
            }
            for (i, (l, s)) in set.layers.iter().zip(&shapes).enumerate() {
                if l.weight.len() != s.weight_len() || l.bias.len() != s.out_channels {
                    return Err(QsmError::ArchMismatch(format!(
                        "layer {i} has the wrong parameter count"
                    )));
                }
            }
            if set.values().any(|v| !v.is_finite()) {
                return Err(QsmError::NonFinite("network parameters".into()));
            }
        }
        Ok(())
    }

    /// Weights used by unrolled iteration `iteration` (zero based).
    pub fn weights_for(&self, iteration: usize) -> Result<&NetWeights> {
        if self.shared_across_iterations {
            return Ok(&self.sets[0]);
        }
        self.sets.get(iteration).ok_or_else(|| {
            QsmError::InvalidConfig(format!(
                "per-iteration parameters cover {} iterations, iteration {} requested",
                self.sets.len(),
                iteration + 1
            ))
        })
    }

    pub fn num_params(&self) -> usize {
        self.sets.iter().map(|s| s.values().count()).sum()
    }

    /// Every parameter in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.sets.iter().flat_map(|s| s.values().copied()).collect()
    }

    /// Overwrites every parameter from `flat`, in declaration order.
    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let targets = self.sets.iter_mut().flat_map(|s| s.values_mut());
        for (t, v) in targets.zip(flat) {
            *t = *v;
        }
    }
}

/// Evaluation-mode network output `z + net(z)` using the weights of
/// iteration `iteration`. Dropout is disabled.
pub fn prox_apply_at(params: &ProxParams, z: &RealVolume, iteration: usize) -> Result<RealVolume> {
    let weights = params.weights_for(iteration)?;
    let arch = &params.arch;
    let shapes = arch.conv_shapes();
    let dims = z.grid().dims;
    if dims.iter().any(|&d| d < arch.kernel) {
        return Err(QsmError::InvalidConfig(format!(
            "grid {dims:?} is smaller than the {}³ kernel",
            arch.kernel
        )));
    }
    let finite = |t: &Tensor, layer: usize| -> Result<()> {
        if t.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(QsmError::NonFinite(format!("network activation at layer {layer}")))
        }
    };
    let conv = |t: &Tensor, layer: usize| -> Result<Tensor> {
        let p = &weights.layers[layer];
        let out = tensor::conv3d_forward(t, &p.weight, &p.bias, shapes[layer]);
        finite(&out, layer)?;
        Ok(out)
    };
    let act = arch.activation;

    let input = Tensor::from_data(1, dims, z.data().to_vec());
    let mut h = conv(&input, 0)?;
    for b in 0..arch.blocks {
        let t = conv(&act.apply(&h), 1 + 2 * b)?;
        let t = conv(&act.apply(&t), 2 + 2 * b)?;
        h.add_assign(&t);
    }
    let out = conv(&act.apply(&h), shapes.len() - 1)?;
    let data = z.data().iter().zip(out.data()).map(|(a, b)| a + b).collect();
    RealVolume::new(*z.grid(), data)
}

/// [`prox_apply_at`] with the first weight set.
pub fn prox_apply(params: &ProxParams, z: &RealVolume) -> Result<RealVolume> {
    prox_apply_at(params, z, 0)
}

/// The trained network as a [`ProximalMap`] for the solver.
#[derive(Clone, Debug)]
pub struct LearnedProx {
    pub params: ProxParams,
}

impl LearnedProx {
    pub fn new(params: ProxParams) -> Result<Self> {
        params.validate()?;
        Ok(LearnedProx { params })
    }
}

impl ProximalMap for LearnedProx {
    fn apply(&self, z: &RealVolume, iteration: usize) -> Result<RealVolume> {
        prox_apply_at(&self.params, z, iteration)
    }

    fn family(&self) -> ProxFamily {
        ProxFamily::Learned
    }
}
