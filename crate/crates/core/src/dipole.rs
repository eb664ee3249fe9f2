//! The dipole kernel and the forward operators built from it.
//!
//! The kernel is `D(k) = 1/3 − (k·h)² / ‖k‖²` with `k` in physical units
//! (cycles per mm) and `D(0) := 0`. The forward operator is
//! `Φ = F⁻¹ D F`. Because `D` is real and even under frequency negation,
//! `Φ` maps real volumes to real volumes and is self-adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::volume::{fft3_in_place, fft_frequency, ifft3_in_place, negated_index, GridSpec, RealVolume};

const UNIT_TOL: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-10;

pub type Matrix3 = [[f64; 3]; 3];

/// Direction of B0 in image coordinates.
///
/// When built from a rotation `R` the direction is `h = R·ẑ`, i.e. the
/// third column of `R`: B0 is fixed in the lab frame and the object is
/// rotated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    h: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<Matrix3>,
}

impl Orientation {
    /// B0 along `h`, which must already be unit length.
    pub fn new(h: [f64; 3]) -> Result<Self> {
        let norm = norm3(h);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(QsmError::InvalidOrientation(format!(
                "B0 direction must be a unit vector, |h| = {norm}"
            )));
        }
        Ok(Orientation { h, rotation: None })
    }

    /// B0 along `v / ‖v‖`.
    pub fn from_direction(v: [f64; 3]) -> Result<Self> {
        let norm = norm3(v);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(QsmError::InvalidOrientation(format!(
                "cannot normalize direction {v:?}"
            )));
        }
        Ok(Orientation {
            h: v.map(|c| c / norm),
            rotation: None,
        })
    }

    /// B0 along `R·ẑ` for a proper rotation `R`.
    pub fn from_rotation(r: Matrix3) -> Result<Self> {
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|i| r[i][a] * r[i][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if !dot.is_finite() || (dot - want).abs() > ROTATION_TOL {
                    return Err(QsmError::InvalidOrientation(format!(
                        "rotation is not orthonormal: (RᵀR)[{a}][{b}] = {dot}"
                    )));
                }
            }
        }
        let det = det3(&r);
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(QsmError::InvalidOrientation(format!(
                "rotation must have determinant +1, got {det}"
            )));
        }
        let h = [r[0][2], r[1][2], r[2][2]];
        Ok(Orientation { h, rotation: Some(r) })
    }

    /// B0 along ẑ.
    pub fn axial() -> Self {
        Orientation {
            h: [0.0, 0.0, 1.0],
            rotation: None,
        }
    }

    /// ẑ rotated by `degrees` about the x axis.
    pub fn tilted_about_x(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let r = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
        Orientation {
            h: [r[0][2], r[1][2], r[2][2]],
            rotation: Some(r),
        }
    }

    /// ẑ rotated by `degrees` about the y axis.
    pub fn tilted_about_y(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let r = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
        Orientation {
            h: [r[0][2], r[1][2], r[2][2]],
            rotation: Some(r),
        }
    }

    pub fn h(&self) -> [f64; 3] {
        self.h
    }

    pub fn rotation(&self) -> Option<&Matrix3> {
        self.rotation.as_ref()
    }

    /// Angle between B0 and ẑ, in degrees.
    pub fn tilt_degrees(&self) -> f64 {
        self.h[2].clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self.rotation {
            Some(r) => {
                let o = Orientation::from_rotation(r)?;
                let diff = norm3([o.h[0] - self.h[0], o.h[1] - self.h[1], o.h[2] - self.h[2]]);
                if diff > UNIT_TOL {
                    return Err(QsmError::InvalidOrientation("h does not equal R·ẑ".into()));
                }
                Ok(())
            }
            None => Orientation::new(self.h).map(|_| ()),
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn det3(r: &Matrix3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Kernel value at physical frequency `k` for unit B0 direction `h`.
#[inline]
pub fn kernel_value(k: [f64; 3], h: [f64; 3]) -> f64 {
    let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
    if k2 == 0.0 {
        return 0.0;
    }
    let kh = k[0] * h[0] + k[1] * h[1] + k[2] * h[2];
    1.0 / 3.0 - kh * kh / k2
}

/// Physical frequency (cycles/mm) of DFT bin `(i, j, k)`.
#[inline]
pub fn physical_frequency(grid: &GridSpec, i: usize, j: usize, k: usize) -> [f64; 3] {
    let [nx, ny, nz] = grid.dims;
    let [vx, vy, vz] = grid.voxel_size;
    [
        fft_frequency(i, nx) / vx,
        fft_frequency(j, ny) / vy,
        fft_frequency(k, nz) / vz,
    ]
}

/// A self-adjoint linear map on real volumes.
pub trait LinearOperator {
    /// Grid of both the input and the output.
    fn grid(&self) -> &GridSpec;

    fn apply(&self, x: &RealVolume) -> Result<RealVolume>;

    fn apply_adjoint(&self, y: &RealVolume) -> Result<RealVolume>;

    /// `ΦᴴΦx`.
    fn normal(&self, x: &RealVolume) -> Result<RealVolume> {
        self.apply_adjoint(&self.apply(x)?)
    }
}

/// Diagonal Fourier-domain dipole kernel for one B0 orientation.
#[derive(Clone, Debug)]
pub struct DipoleOperator {
    grid: GridSpec,
    orientation: Orientation,
    kernel: Vec<f64>,
}

/// Builds the dipole kernel over the full k-space grid of `grid`.
pub fn dipole_kernel(grid: GridSpec, orientation: Orientation) -> Result<DipoleOperator> {
    grid.validate()?;
    orientation.validate()?;
    let h = orientation.h;
    let [nx, ny, nz] = grid.dims;
    let mut kernel = Vec::with_capacity(grid.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                // On a Nyquist plane the mirror bin of f is not -f, so the two
                // values are averaged to keep the kernel even; elsewhere they agree
                let f = physical_frequency(&grid, i, j, k);
                let m = physical_frequency(&grid, negated_index(i, nx), negated_index(j, ny), negated_index(k, nz));
                kernel.push(0.5 * (kernel_value(f, h) + kernel_value(m, h)));
            }
        }
    }
    Ok(DipoleOperator {
        grid,
        orientation,
        kernel,
    })
}

impl DipoleOperator {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    /// Kernel values in the volume layout (unshifted, DC at index 0).
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Multiplies the spectrum of `x` by `f(D)` and returns the real part
    /// of the inverse transform.
    fn filter(&self, x: &RealVolume, f: impl Fn(f64) -> f64) -> Result<RealVolume> {
        self.grid.ensure_same(x.grid())?;
        let mut spec = x.to_complex();
        fft3_in_place(&mut spec);
        for (c, &d) in spec.data_mut().iter_mut().zip(&self.kernel) {
            *c *= f(d);
        }
        ifft3_in_place(&mut spec);
        let (out, max_imag) = spec.split_real();
        debug_assert!(
            max_imag <= 1e-10 * x.max_abs().max(f64::MIN_POSITIVE),
            "imaginary residue {max_imag:e}"
        );
        Ok(out)
    }

    /// `Φx`.
    pub fn forward(&self, x: &RealVolume) -> Result<RealVolume> {
        self.filter(x, |d| d)
    }

    /// `Φᴴy`; equal to [`DipoleOperator::forward`] since the kernel is real
    /// and even.
    pub fn adjoint(&self, y: &RealVolume) -> Result<RealVolume> {
        self.filter(y, |d| d)
    }
}

impl LinearOperator for DipoleOperator {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn apply(&self, x: &RealVolume) -> Result<RealVolume> {
        self.forward(x)
    }

    fn apply_adjoint(&self, y: &RealVolume) -> Result<RealVolume> {
        self.adjoint(y)
    }

    fn normal(&self, x: &RealVolume) -> Result<RealVolume> {
        self.filter(x, |d| d * d)
    }
}

/// `Φ̄ = [Φ₁; …; Φ_L]`: one kernel per acquisition orientation on a common
/// grid.
#[derive(Clone, Debug)]
pub struct StackedOperator {
    ops: Vec<DipoleOperator>,
}

impl StackedOperator {
    pub fn new(ops: Vec<DipoleOperator>) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| QsmError::InvalidConfig("a stacked operator needs at least one orientation".into()))?;
        for op in &ops[1..] {
            first.grid.ensure_same(&op.grid)?;
        }
        Ok(StackedOperator { ops })
    }

    pub fn single(op: DipoleOperator) -> Self {
        StackedOperator { ops: vec![op] }
    }

    pub fn ops(&self) -> &[DipoleOperator] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.ops[0].grid
    }
}

pub(crate) fn check_measurements<A: LinearOperator>(ops: &[A], ys: &[RealVolume]) -> Result<()> {
    if ops.is_empty() {
        return Err(QsmError::InvalidConfig("no measurement operators".into()));
    }
    if ops.len() != ys.len() {
        return Err(QsmError::LengthMismatch {
            expected: ops.len(),
            found: ys.len(),
            context: "one measurement per orientation",
        });
    }
    let grid = ops[0].grid();
    for (op, y) in ops.iter().zip(ys) {
        grid.ensure_same(op.grid())?;
        grid.ensure_same(y.grid())?;
    }
    Ok(())
}

/// Averaged data-fidelity gradient `(1/L) Σₗ Φₗᴴ(Φₗx − yₗ)`, accumulated
/// in list order.
pub fn grad_datafit_with<A: LinearOperator>(ops: &[A], x: &RealVolume, ys: &[RealVolume]) -> Result<RealVolume> {
    check_measurements(ops, ys)?;
    ops[0].grid().ensure_same(x.grid())?;
    let mut acc = vec![0.0; x.len()];
    for (op, y) in ops.iter().zip(ys) {
        let hx = op.normal(x)?;
        let hy = op.apply_adjoint(y)?;
        for ((a, u), v) in acc.iter_mut().zip(hx.data()).zip(hy.data()) {
            *a += u - v;
        }
    }
    let inv_l = 1.0 / ops.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv_l);
    Ok(RealVolume::from_parts(*x.grid(), acc))
}

pub fn grad_datafit(ops: &StackedOperator, x: &RealVolume, ys: &[RealVolume]) -> Result<RealVolume> {
    grad_datafit_with(ops.ops(), x, ys)
}

/// Averaged data fidelity `(1/2L) Σₗ ‖Φₗx − yₗ‖²`.
pub fn datafit_with<A: LinearOperator>(ops: &[A], x: &RealVolume, ys: &[RealVolume]) -> Result<f64> {
    check_measurements(ops, ys)?;
    let mut total = 0.0;
    for (op, y) in ops.iter().zip(ys) {
        let r = op.apply(x)?.sub(y)?;
        total += 0.5 * r.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / ops.len() as f64)
}

pub fn datafit(ops: &StackedOperator, x: &RealVolume, ys: &[RealVolume]) -> Result<f64> {
    datafit_with(ops.ops(), x, ys)
}

/// Placement of a patch inside a full grid: `P` zero-pads, `C = Pᵀ` crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub patch_dims: [usize; 3],
    pub offset: [usize; 3],
    pub full_dims: [usize; 3],
}

impl PadSpec {
    pub fn new(patch_dims: [usize; 3], offset: [usize; 3], full_dims: [usize; 3]) -> Result<Self> {
        let pad = PadSpec {
            patch_dims,
            offset,
            full_dims,
        };
        pad.validate()?;
        Ok(pad)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.patch_dims[a] == 0 || self.full_dims[a] == 0 {
                return Err(QsmError::InvalidConfig(format!("empty patch spec {self:?}")));
            }
            if self.offset[a] + self.patch_dims[a] > self.full_dims[a] {
                return Err(QsmError::InvalidConfig(format!(
                    "patch {:?} at offset {:?} exceeds grid {:?}",
                    self.patch_dims, self.offset, self.full_dims
                )));
            }
        }
        Ok(())
    }

    fn patch_grid(&self, full: &GridSpec) -> Result<GridSpec> {
        GridSpec::new(self.patch_dims, full.voxel_size)
    }

    fn check_full(&self, full: &GridSpec) -> Result<()> {
        if full.dims != self.full_dims {
            return Err(QsmError::InvalidConfig(format!(
                "pad spec expects a {:?} grid, operator grid is {:?}",
                self.full_dims, full.dims
            )));
        }
        Ok(())
    }

    fn check_patch(&self, patch: &RealVolume) -> Result<()> {
        if patch.grid().dims != self.patch_dims {
            return Err(QsmError::InvalidConfig(format!(
                "patch has dims {:?}, pad spec expects {:?}",
                patch.grid().dims,
                self.patch_dims
            )));
        }
        Ok(())
    }

    /// `P`: embed `patch` at the offset inside a zero volume on `full`.
    pub fn zero_pad(&self, patch: &RealVolume, full: &GridSpec) -> Result<RealVolume> {
        self.check_full(full)?;
        self.check_patch(patch)?;
        let [px, py, pz] = self.patch_dims;
        let [ox, oy, oz] = self.offset;
        let mut data = vec![0.0; full.len()];
        for k in 0..pz {
            for j in 0..py {
                let src = &patch.data()[patch.grid().index(0, j, k)..][..px];
                let dst = full.index(ox, oy + j, oz + k);
                data[dst..dst + px].copy_from_slice(src);
            }
        }
        Ok(RealVolume::from_parts(*full, data))
    }

    /// `C`: extract the patch region of `full`.
    pub fn crop(&self, full: &RealVolume) -> Result<RealVolume> {
        self.check_full(full.grid())?;
        let grid = self.patch_grid(full.grid())?;
        let [px, py, pz] = self.patch_dims;
        let [ox, oy, oz] = self.offset;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..pz {
            for j in 0..py {
                let src = full.grid().index(ox, oy + j, oz + k);
                data.extend_from_slice(&full.data()[src..src + px]);
            }
        }
        Ok(RealVolume::from_parts(grid, data))
    }
}

/// `Φ′ = C Φ P`: the full-grid dipole operator restricted to a patch.
#[derive(Clone, Debug)]
pub struct PatchOperator<'a> {
    op: &'a DipoleOperator,
    pad: PadSpec,
    patch_grid: GridSpec,
}

impl<'a> PatchOperator<'a> {
    pub fn new(op: &'a DipoleOperator, pad: PadSpec) -> Result<Self> {
        pad.validate()?;
        pad.check_full(&op.grid)?;
        let patch_grid = pad.patch_grid(&op.grid)?;
        Ok(PatchOperator { op, pad, patch_grid })
    }

    pub fn pad(&self) -> &PadSpec {
        &self.pad
    }
}

impl LinearOperator for PatchOperator<'_> {
    fn grid(&self) -> &GridSpec {
        &self.patch_grid
    }

    fn apply(&self, x: &RealVolume) -> Result<RealVolume> {
        let full = self.pad.zero_pad(x, &self.op.grid)?;
        self.pad.crop(&self.op.forward(&full)?)
    }

    fn apply_adjoint(&self, y: &RealVolume) -> Result<RealVolume> {
        // (CΦP)ᴴ = PᵀΦᴴCᵀ = CΦP
        self.apply(y)
    }
}

/// `crop(forward(zero_pad(patch)))`.
pub fn padded_forward(op: &DipoleOperator, patch: &RealVolume, pad: &PadSpec) -> Result<RealVolume> {
    PatchOperator::new(op, *pad)?.apply(patch)
}

/// The kernel built directly on the patch grid, ignoring the surrounding
/// field of view. Only useful to show what patch training loses.
pub fn naive_patch_operator(op: &DipoleOperator, pad: &PadSpec) -> Result<DipoleOperator> {
    pad.check_full(&op.grid)?;
    dipole_kernel(pad.patch_grid(&op.grid)?, op.orientation)
}
