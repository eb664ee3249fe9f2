//! Proximal gradient descent for the dipole inversion.
//!
//! Each iteration applies the affine data-consistency map
//! `z = x + (α/L) Φ̄ᴴ(ȳ − Φ̄x)` followed by a proximal map. With the
//! identity proximal this is Landweber iteration; with a learned proximal it
//! is the unrolled network evaluated at deployment.

use serde::{Deserialize, Serialize};

use crate::dipole::{check_measurements, datafit_with, grad_datafit_with, LinearOperator, StackedOperator};
use crate::error::{QsmError, Result};
use crate::volume::RealVolume;

/// Iterates whose norm exceeds this multiple of `‖(α/L)Φ̄ᴴȳ‖` abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxFamily {
    Identity,
    SoftThreshold,
    Learned,
}

/// A proximal map applied after every data-consistency step.
///
/// `iteration` is the zero-based index of the update being produced, which
/// lets maps with per-iteration parameters pick the right set.
pub trait ProximalMap {
    fn apply(&self, z: &RealVolume, iteration: usize) -> Result<RealVolume>;

    fn family(&self) -> ProxFamily;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProx;

impl ProximalMap for IdentityProx {
    fn apply(&self, z: &RealVolume, _iteration: usize) -> Result<RealVolume> {
        Ok(z.clone())
    }

    fn family(&self) -> ProxFamily {
        ProxFamily::Identity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    /// Gradient step size α.
    pub alpha: f64,
    /// Number of updates k.
    pub iterations: usize,
    /// Starting point; zero when absent.
    pub initial: Option<RealVolume>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            alpha: 1.0,
            iterations: 3,
            initial: None,
        }
    }
}

impl ReconConfig {
    pub fn new(alpha: f64, iterations: usize) -> Result<Self> {
        let cfg = ReconConfig {
            alpha,
            iterations,
            initial: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(QsmError::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(QsmError::InvalidConfig("at least one iteration is required".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a reconstruction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterTrace {
    /// `f̄(x̂₀)`.
    pub initial_fidelity: f64,
    /// `f̄(x̂ᵢ)` for `i = 1..=k`.
    pub fidelity: Vec<f64>,
    /// NRMSE (%) of each iterate against a reference, when one was given.
    pub nrmse: Option<Vec<f64>>,
}

/// `x + (α/L) Φ̄ᴴ(ȳ − Φ̄x)`.
pub fn data_consistency_step_with<A: LinearOperator>(
    ops: &[A],
    ys: &[RealVolume],
    x: &RealVolume,
    alpha: f64,
) -> Result<RealVolume> {
    let grad = grad_datafit_with(ops, x, ys)?;
    x.lincomb(1.0, &grad, -alpha)
}

pub fn data_consistency_step(
    ops: &StackedOperator,
    ys: &[RealVolume],
    x: &RealVolume,
    alpha: f64,
) -> Result<RealVolume> {
    data_consistency_step_with(ops.ops(), ys, x, alpha)
}

pub fn pgd_reconstruct(
    ops: &StackedOperator,
    ys: &[RealVolume],
    prox: &dyn ProximalMap,
    cfg: &ReconConfig,
) -> Result<(RealVolume, IterTrace)> {
    pgd_reconstruct_with(ops.ops(), ys, prox, cfg, None)
}

/// Runs exactly `cfg.iterations` proximal gradient updates; when `reference`
/// is given the trace also records the NRMSE of every iterate.
pub fn pgd_reconstruct_with<A: LinearOperator>(
    ops: &[A],
    ys: &[RealVolume],
    prox: &dyn ProximalMap,
    cfg: &ReconConfig,
    reference: Option<&RealVolume>,
) -> Result<(RealVolume, IterTrace)> {
    cfg.validate()?;
    check_measurements(ops, ys)?;
    let grid = *ops[0].grid();
    let mut x = match &cfg.initial {
        Some(x0) => {
            grid.ensure_same(x0.grid())?;
            x0.clone()
        }
        None => RealVolume::zeros(grid),
    };

    let first_step = data_consistency_step_with(ops, ys, &RealVolume::zeros(grid), cfg.alpha)?;
    let bound = DIVERGENCE_FACTOR * first_step.norm();

    let mut trace = IterTrace {
        initial_fidelity: datafit_with(ops, &x, ys)?,
        fidelity: Vec::with_capacity(cfg.iterations),
        nrmse: reference.map(|_| Vec::with_capacity(cfg.iterations)),
    };

    for i in 0..cfg.iterations {
        let z = data_consistency_step_with(ops, ys, &x, cfg.alpha)?;
        x = prox.apply(&z, i)?;
        if !x.is_finite() {
            return Err(QsmError::NonFinite(format!(
                "iterate {} ({:?} proximal)",
                i + 1,
                prox.family()
            )));
        }
        let norm = x.norm();
        if bound > 0.0 && norm > bound {
            return Err(QsmError::Divergence {
                iteration: i + 1,
                norm,
                bound,
            });
        }
        trace.fidelity.push(datafit_with(ops, &x, ys)?);
        if let (Some(r), Some(curve)) = (reference, trace.nrmse.as_mut()) {
            curve.push(crate::metrics::nrmse_unmasked(&x, r)?);
        }
    }
    Ok((x, trace))
}
