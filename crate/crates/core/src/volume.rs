//! Grids, real and complex volumes, and 3D discrete Fourier transforms.
//!
//! All volumes store their samples in a flat buffer with `x` varying fastest
//! and `z` slowest, so voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`.
//! The same order is used by every file format in the crate.
//!
//! The forward transform is unnormalized and the inverse carries the `1/N`
//! factor, so `ifft3(fft3(v)) == v` and `‖fft3(v)‖² == N‖v‖²`.

use std::cell::RefCell;
use std::fmt;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};

/// Image-space discretization: voxel counts and voxel size in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let grid = GridSpec { dims, voxel_size };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with 1 mm isotropic voxels.
    pub fn isotropic(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(QsmError::InvalidGrid(format!(
                "all dimensions must be at least 2, got {:?}",
                self.dims
            )));
        }
        if self.voxel_size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(QsmError::InvalidGrid(format!(
                "voxel sizes must be positive and finite, got {:?}",
                self.voxel_size
            )));
        }
        Ok(())
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Position of voxel `(i, j, k)` in mm.
    #[inline]
    pub fn coords_mm(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            i as f64 * self.voxel_size[0],
            j as f64 * self.voxel_size[1],
            k as f64 * self.voxel_size[2],
        ]
    }

    /// Same voxel counts; voxel sizes may differ by rounding only.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        let same_size = self
            .voxel_size
            .iter()
            .zip(other.voxel_size.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()));
        if self.dims == other.dims && same_size {
            Ok(())
        } else {
            Err(QsmError::GridMismatch {
                expected: *self,
                found: *other,
            })
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [nx, ny, nz] = self.dims;
        let [vx, vy, vz] = self.voxel_size;
        write!(f, "{nx}x{ny}x{nz} @ {vx}x{vy}x{vz} mm")
    }
}

/// DFT sample frequency (cycles per sample) of index `i` on an axis of
/// length `n`. The upper half holds negative frequencies; for even `n` the
/// Nyquist bin `n/2` is assigned to the negative side.
#[inline]
pub fn fft_frequency(i: usize, n: usize) -> f64 {
    let half = (n - 1) / 2;
    if i <= half {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

/// Index of `-f` for the frequency stored at `i`, modulo `n`.
#[inline]
pub fn negated_index(i: usize, n: usize) -> usize {
    (n - i) % n
}

/// A real scalar field on a grid (susceptibility or local phase).
#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl RealVolume {
    /// Wraps `data`, checking its length and that every sample is finite.
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
                context: "volume samples",
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let [i, j, k] = grid.coords(pos);
            return Err(QsmError::NonFinite(format!("volume sample ({i}, {j}, {k})")));
        }
        Ok(RealVolume { grid, data })
    }

    pub(crate) fn from_parts(grid: GridSpec, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        RealVolume { grid, data }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        RealVolume {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        RealVolume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        RealVolume { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealVolume {
        RealVolume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> RealVolume {
        self.map(|v| s * v)
    }

    /// `a·self + b·other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &RealVolume, b: f64) -> Result<RealVolume> {
        self.grid.ensure_same(&other.grid)?;
        Ok(RealVolume {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn add(&self, other: &RealVolume) -> Result<RealVolume> {
        self.lincomb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &RealVolume) -> Result<RealVolume> {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn to_complex(&self) -> ComplexVolume {
        ComplexVolume {
            grid: self.grid,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

/// A complex field on a grid, typically k-space data.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    grid: GridSpec,
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn new(grid: GridSpec, data: Vec<Complex64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
                context: "complex volume samples",
            });
        }
        if data.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(QsmError::NonFinite("complex volume".into()));
        }
        Ok(ComplexVolume { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        ComplexVolume {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Real part, together with the largest imaginary magnitude discarded.
    pub fn split_real(self) -> (RealVolume, f64) {
        let max_imag = self.data.iter().fold(0.0_f64, |m, c| m.max(c.im.abs()));
        let data = self.data.into_iter().map(|c| c.re).collect();
        (RealVolume::from_parts(self.grid, data), max_imag)
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Runs 1D transforms along all three axes in place.
fn transform_in_place(data: &mut [Complex64], dims: [usize; 3], direction: FftDirection) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let plans = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        [nx, ny, nz].map(|len| p.plan_fft(len, direction))
    });

    // x lines are contiguous; rustfft processes back-to-back chunks.
    plans[0].process(data);

    let mut lines = vec![Complex64::new(0.0, 0.0); n];

    // y lines
    for k in 0..nz {
        let slab = &data[k * nx * ny..(k + 1) * nx * ny];
        let out = &mut lines[k * nx * ny..(k + 1) * nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                out[i * ny + j] = slab[i + nx * j];
            }
        }
    }
    plans[1].process(&mut lines);
    for k in 0..nz {
        let src = &lines[k * nx * ny..(k + 1) * nx * ny];
        let slab = &mut data[k * nx * ny..(k + 1) * nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                slab[i + nx * j] = src[i * ny + j];
            }
        }
    }

    // z lines
    let plane = nx * ny;
    for p in 0..plane {
        for k in 0..nz {
            lines[p * nz + k] = data[p + plane * k];
        }
    }
    plans[2].process(&mut lines);
    for p in 0..plane {
        for k in 0..nz {
            data[p + plane * k] = lines[p * nz + k];
        }
    }
}

/// Unnormalized forward 3D DFT.
pub fn fft3(v: &ComplexVolume) -> ComplexVolume {
    let mut out = v.clone();
    transform_in_place(&mut out.data, v.grid.dims, FftDirection::Forward);
    out
}

/// Inverse 3D DFT including the `1/N` normalization.
pub fn ifft3(v: &ComplexVolume) -> ComplexVolume {
    let mut out = v.clone();
    ifft3_in_place(&mut out);
    out
}

pub(crate) fn fft3_in_place(v: &mut ComplexVolume) {
    let dims = v.grid.dims;
    transform_in_place(&mut v.data, dims, FftDirection::Forward);
}

pub(crate) fn ifft3_in_place(v: &mut ComplexVolume) {
    let dims = v.grid.dims;
    transform_in_place(&mut v.data, dims, FftDirection::Inverse);
    let scale = 1.0 / v.data.len() as f64;
    for c in v.data.iter_mut() {
        *c *= scale;
    }
}

/// Euclidean inner product `Σ aᵢbᵢ` of two volumes on the same grid.
pub fn inner_product(a: &RealVolume, b: &RealVolume) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

#[derive(Clone, Copy)]
pub(crate) enum Edge {
    /// Samples beyond the grid repeat the nearest edge voxel.
    Replicate,
    /// Out-of-grid taps are dropped and the remaining weights renormalised.
    Truncate,
}

/// Correlates `data` with the centred 1D `taps` along `axis`.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64], edge: Edge) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; dims[axis]];
    for base in 0..data.len() {
        // visit each line once, from its first sample
        if (base / stride) % dims[axis] != 0 {
            continue;
        }
        for (p, v) in line.iter_mut().enumerate() {
            *v = data[base + p * stride];
        }
        for p in 0..n {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let q = p + t as isize - r;
                match edge {
                    Edge::Replicate => acc += w * line[q.clamp(0, n - 1) as usize],
                    Edge::Truncate => {
                        if (0..n).contains(&q) {
                            acc += w * line[q as usize];
                            wsum += w;
                        }
                    }
                }
            }
            out[base + p as usize * stride] = match edge {
                Edge::Replicate => acc,
                Edge::Truncate => acc / wsum,
            };
        }
    }
    out
}

pub(crate) fn separable_filter(data: &[f64], dims: [usize; 3], taps: [&[f64]; 3], edge: Edge) -> Vec<f64> {
    let a = filter_axis(data, dims, 0, taps[0], edge);
    let b = filter_axis(&a, dims, 1, taps[1], edge);
    filter_axis(&b, dims, 2, taps[2], edge)
}
