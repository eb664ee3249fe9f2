//! Classical reconstructions: thresholded k-space division, multi-orientation
//! least squares (COSMOS), and the soft-threshold proximal for an
//! ℓ1-regularized proximal gradient run.

use serde::{Deserialize, Serialize};

use crate::dipole::DipoleOperator;
use crate::error::{QsmError, Result};
use crate::solver::{ProxFamily, ProximalMap};
use crate::volume::{fft3_in_place, ifft3_in_place, ComplexVolume, RealVolume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TkdConfig {
    /// Kernel magnitude below which `D` is clamped to `±threshold`.
    pub threshold: f64,
}

impl Default for TkdConfig {
    fn default() -> Self {
        TkdConfig { threshold: 0.2 }
    }
}

impl TkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 2.0 / 3.0) {
            return Err(QsmError::InvalidConfig(format!(
                "TKD threshold must lie in (0, 2/3), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosmosConfig {
    /// Frequencies with `Σ D²` below this are set to zero.
    pub threshold: f64,
}

impl Default for CosmosConfig {
    fn default() -> Self {
        CosmosConfig { threshold: 1e-6 }
    }
}

impl CosmosConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(QsmError::InvalidConfig(format!(
                "COSMOS threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

fn spectrum(v: &RealVolume) -> ComplexVolume {
    let mut s = v.to_complex();
    fft3_in_place(&mut s);
    s
}

fn real_inverse(mut s: ComplexVolume) -> RealVolume {
    ifft3_in_place(&mut s);
    s.split_real().0
}

/// `F⁻¹(Fy / D̃)` where `D̃ = D` if `|D| ≥ t` and `sign(D)·t` otherwise,
/// with `sign(0) = +1`.
pub fn tkd(y: &RealVolume, op: &DipoleOperator, cfg: &TkdConfig) -> Result<RealVolume> {
    cfg.validate()?;
    op.grid().ensure_same(y.grid())?;
    let t = cfg.threshold;
    let mut s = spectrum(y);
    for (c, &d) in s.data_mut().iter_mut().zip(op.kernel()) {
        let clamped = if d.abs() >= t {
            d
        } else if d < 0.0 {
            -t
        } else {
            t
        };
        *c /= clamped;
    }
    Ok(real_inverse(s))
}

/// Per-frequency least squares over all orientations:
/// `x̂(k) = Σₗ Dₗ(k)·Yₗ(k) / Σₗ Dₗ(k)²`, zero where the denominator is below
/// the threshold.
pub fn cosmos_lsq(ys: &[RealVolume], ops: &[DipoleOperator], cfg: &CosmosConfig) -> Result<RealVolume> {
    cfg.validate()?;
    crate::dipole::check_measurements(ops, ys)?;
    if ops.len() > 1 {
        let first = ops[0].orientation().h();
        let all_same = ops[1..].iter().all(|o| {
            let h = o.orientation().h();
            (0..3).all(|a| (h[a] - first[a]).abs() < 1e-12)
        });
        if all_same {
            log::warn!(
                "all {} COSMOS orientations are identical; no conditioning gain",
                ops.len()
            );
        }
    }
    let grid = *ys[0].grid();
    let mut num = ComplexVolume::zeros(grid);
    let mut den = vec![0.0; grid.len()];
    for (op, y) in ops.iter().zip(ys) {
        let s = spectrum(y);
        for (((n, d2), c), &d) in num
            .data_mut()
            .iter_mut()
            .zip(den.iter_mut())
            .zip(s.data())
            .zip(op.kernel())
        {
            *n += c * d;
            *d2 += d * d;
        }
    }
    for (n, &d2) in num.data_mut().iter_mut().zip(&den) {
        if d2 >= cfg.threshold {
            *n /= d2;
        } else {
            *n = 0.0.into();
        }
    }
    Ok(real_inverse(num))
}

/// `sign(z)·max(|z| − τ, 0)`, elementwise.
pub fn soft_threshold_prox(z: &RealVolume, tau: f64) -> Result<RealVolume> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(QsmError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok(z.map(|v| v.signum() * (v.abs() - tau).max(0.0)))
}

/// Proximal of `τ‖·‖₁`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftThreshold {
    pub tau: f64,
}

impl ProximalMap for SoftThreshold {
    fn apply(&self, z: &RealVolume, _iteration: usize) -> Result<RealVolume> {
        soft_threshold_prox(z, self.tau)
    }

    fn family(&self) -> ProxFamily {
        ProxFamily::SoftThreshold
    }
}
