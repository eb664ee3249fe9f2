//! Supervised training of the learned proximal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unroll::{unrolled_loss_and_grad, DataConsistency};
use super::{ArchSpec, ProxParams};
use crate::dipole::{DipoleOperator, PadSpec, PatchOperator};
use crate::error::{QsmError, Result};
use crate::volume::RealVolume;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Random streams derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    /// Unrolled iterations `k`.
    pub iterations: usize,
    /// Gradient step size of the data-consistency update.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Side lengths of the random training patches; clamped to the volume.
    pub patch_dims: [usize; 3],
    pub shared_across_iterations: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::default(),
            iterations: 3,
            alpha: 1.0,
            epochs: 100,
            batch_size: 2,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            lr_decay: 0.8,
            lr_decay_every: 25,
            patch_dims: [64; 3],
            shared_across_iterations: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |msg: String| Err(QsmError::InvalidConfig(msg));
        if self.iterations == 0 {
            return bad("at least one unrolled iteration is required".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("step size must be positive, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("learning-rate decay needs a positive factor and period".into());
        }
        if self.patch_dims.iter().any(|&d| d < self.arch.kernel) {
            return bad(format!("patch {:?} is smaller than the kernel", self.patch_dims));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One training example: a local field, its forward model and the target.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub field: RealVolume,
    pub op: DipoleOperator,
    pub target: RealVolume,
}

impl TrainPair {
    pub fn new(field: RealVolume, op: DipoleOperator, target: RealVolume) -> Result<Self> {
        op.grid().ensure_same(field.grid())?;
        op.grid().ensure_same(target.grid())?;
        Ok(TrainPair { field, op, target })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's samples of `Σ (x̂ − target)²`.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            *p -= lr * (update + weight_decay * *p);
        }
    }
}

fn random_pad(pair: &TrainPair, patch: [usize; 3], rng: &mut ChaCha8Rng) -> Result<PadSpec> {
    let full = pair.op.grid().dims;
    let mut dims = [0; 3];
    let mut offset = [0; 3];
    for a in 0..3 {
        dims[a] = patch[a].min(full[a]);
        offset[a] = rng.gen_range(0..=full[a] - dims[a]);
    }
    PadSpec::new(dims, offset, full)
}

/// Loss and gradient of one sample, restricted to a random patch.
fn sample_gradient(
    params: &ProxParams,
    pair: &TrainPair,
    cfg: &TrainConfig,
    data_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let pad = random_pad(pair, cfg.patch_dims, data_rng)?;
    let ops = [PatchOperator::new(&pair.op, pad)?];
    let ys = [pad.crop(&pair.field)?];
    let target = pad.crop(&pair.target)?;
    let step = DataConsistency::new(&ops, &ys, cfg.alpha)?;
    let out = unrolled_loss_and_grad(params, &step, &target, cfg.iterations, None, Some(dropout_rng))?;
    let grad = out.params.iter().flat_map(|w| w.values().copied()).collect();
    Ok((out.loss, grad))
}

/// Trains fresh parameters from `cfg.seed` with AdamW on random patches.
pub fn train(pairs: &[TrainPair], cfg: &TrainConfig) -> Result<(ProxParams, TrainHistory)> {
    cfg.validate()?;
    let init = ProxParams::init(
        cfg.arch.clone(),
        cfg.shared_across_iterations,
        cfg.iterations,
        derive_seed(cfg.seed, STREAM_INIT),
    )?;
    train_from(init, pairs, cfg)
}

/// Continues training from `params`.
pub fn train_from(
    mut params: ProxParams,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<(ProxParams, TrainHistory)> {
    cfg.validate()?;
    params.validate()?;
    if params.arch != cfg.arch {
        return Err(QsmError::ArchMismatch(
            "initial parameters differ from the configured architecture".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(QsmError::InvalidConfig("training set is empty".into()));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DATA));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT));

    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step_count = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (loss, g) = sample_gradient(&params, &pairs[idx], cfg, &mut data_rng, &mut dropout_rng)?;
                batch_loss += loss;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(QsmError::TrainingDiverged {
                    epoch,
                    step: step_count,
                    loss: batch_loss * scale,
                });
            }
            epoch_loss += batch_loss;
            adam.step(&mut flat, &grad, lr, cfg.weight_decay);
            params.assign(&flat);
            step_count += 1;
        }
        let mean_loss = epoch_loss / pairs.len() as f64;
        log::info!("epoch {:>4}  lr {:.3e}  loss {:.6e}", epoch + 1, lr, mean_loss);
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
        });
    }
    Ok((params, history))
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}
