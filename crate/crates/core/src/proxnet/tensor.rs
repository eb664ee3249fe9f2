//! Multi-channel volumes and the convolution kernels used by the network.
//!
//! Channels are stored one after another, each in the volume layout
//! (x fastest). Convolutions use zero padding and preserve spatial size.
//! Convolutions run as im2col followed by a single-threaded GEMM, so
//! results are reproducible run to run.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub(crate) channels: usize,
    pub(crate) dims: [usize; 3],
    pub(crate) data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Tensor { channels, dims, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            channels: 1,
            dims: [1, 1, 1],
            data: vec![value],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Pointwise nonlinearity between convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Linear,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
        }
    }

    /// Derivative at pre-activation `v`.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if v > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn apply(self, t: &Tensor) -> Tensor {
        Tensor {
            channels: t.channels,
            dims: t.dims,
            data: t.data.iter().map(|&v| self.eval(v)).collect(),
        }
    }
}

/// Voxels per im2col block; bounds the scratch matrix to a few MB.
const BLOCK_VOXELS: usize = 8192;

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    /// Length of one output channel's weights, `in · k³`.
    fn taps(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }
}

/// Slabs of whole z-planes, each holding at most about [`BLOCK_VOXELS`].
fn slabs(dims: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let plane = dims[0] * dims[1];
    let step = (BLOCK_VOXELS / plane).max(1);
    (0..dims[2]).step_by(step).map(move |z0| (z0, (z0 + step).min(dims[2])))
}

/// Visits every (tap row, source row, destination row) of the im2col
/// matrix for planes `z0..z1`. The callback gets the tap index, the source
/// offset of channel row `(ci, sz, sy)`, the column offset of the
/// destination row and the x shift.
fn for_each_tap_row(
    dims: [usize; 3],
    shape: ConvShape,
    z0: usize,
    z1: usize,
    mut f: impl FnMut(usize, usize, usize, isize),
) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let ks = shape.kernel;
    let r = (ks / 2) as isize;
    let mut tap = 0;
    for ci in 0..shape.in_channels {
        for dz in 0..ks {
            for dy in 0..ks {
                for dx in 0..ks {
                    for z in z0..z1 {
                        let sz = z as isize + dz as isize - r;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy as isize - r;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let src = ci * n + (sz as usize * ny + sy as usize) * nx;
                            let col = ((z - z0) * ny + y) * nx;
                            f(tap, src, col, dx as isize - r);
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
}

/// Valid destination range `[x0, x1)` for `dst[x] = src[x + shift]` on rows
/// of length `n`.
#[inline]
fn shifted_range(n: usize, shift: isize) -> (usize, usize) {
    let x0 = (-shift).max(0) as usize;
    let x1 = (n as isize - shift).clamp(0, n as isize) as usize;
    (x0, x1.max(x0))
}

/// Column matrix `[in·k³, m]` for planes `z0..z1`: row `tap` holds the
/// input shifted by that tap, zero outside the volume.
fn im2col(input: &Tensor, shape: ConvShape, z0: usize, z1: usize) -> Vec<f64> {
    let nx = input.dims[0];
    let m = (z1 - z0) * nx * input.dims[1];
    let mut cols = vec![0.0; shape.taps() * m];
    for_each_tap_row(input.dims, shape, z0, z1, |tap, src, col, shift| {
        let (x0, x1) = shifted_range(nx, shift);
        let s0 = (src as isize + x0 as isize + shift) as usize;
        let d0 = tap * m + col;
        cols[d0 + x0..d0 + x1].copy_from_slice(&input.data[s0..s0 + (x1 - x0)]);
    });
    cols
}

/// Adjoint of [`im2col`], accumulated into `grad`.
fn col2im_add(cols: &[f64], grad: &mut Tensor, shape: ConvShape, z0: usize, z1: usize) {
    let nx = grad.dims[0];
    let m = (z1 - z0) * nx * grad.dims[1];
    let dims = grad.dims;
    for_each_tap_row(dims, shape, z0, z1, |tap, src, col, shift| {
        let (x0, x1) = shifted_range(nx, shift);
        let s0 = (src as isize + x0 as isize + shift) as usize;
        let d0 = tap * m + col;
        for (g, c) in grad.data[s0..s0 + (x1 - x0)].iter_mut().zip(&cols[d0 + x0..d0 + x1]) {
            *g += c;
        }
    });
}

/// Row-major `c = a·b + beta·c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= extent(m, k, a.1, a.2));
    assert!(b.0.len() >= extent(k, n, b.1, b.2));
    assert!(c.0.len() >= extent(m, n, c.1, c.2));
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// `out[co] = bias[co] + Σ_ci w[co, ci] ⋆ in[ci]` (cross-correlation, zero
/// padding, same output size).
pub fn conv3d_forward(input: &Tensor, weight: &[f64], bias: &[f64], shape: ConvShape) -> Tensor {
    debug_assert_eq!(input.channels, shape.in_channels);
    debug_assert_eq!(weight.len(), shape.weight_len());
    debug_assert_eq!(bias.len(), shape.out_channels);
    let n = input.voxels();
    let plane = input.dims[0] * input.dims[1];
    let taps = shape.taps();
    let mut out = Tensor::zeros(shape.out_channels, input.dims);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(*b);
    }
    for (z0, z1) in slabs(input.dims) {
        let m = (z1 - z0) * plane;
        let cols = im2col(input, shape, z0, z1);
        let off = z0 * plane;
        gemm(
            shape.out_channels,
            taps,
            m,
            (weight, taps, 1),
            (&cols, m, 1),
            1.0,
            (&mut out.data[off..], n, 1),
        );
    }
    out
}

/// Gradient of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input(grad_out: &Tensor, weight: &[f64], shape: ConvShape) -> Tensor {
    let n = grad_out.voxels();
    let plane = grad_out.dims[0] * grad_out.dims[1];
    let taps = shape.taps();
    let mut grad_in = Tensor::zeros(shape.in_channels, grad_out.dims);
    for (z0, z1) in slabs(grad_out.dims) {
        let m = (z1 - z0) * plane;
        let mut cols = vec![0.0; taps * m];
        let off = z0 * plane;
        gemm(
            taps,
            shape.out_channels,
            m,
            (weight, 1, taps),
            (&grad_out.data[off..], n, 1),
            0.0,
            (&mut cols, m, 1),
        );
        col2im_add(&cols, &mut grad_in, shape, z0, z1);
    }
    grad_in
}

/// Gradients of [`conv3d_forward`] with respect to weights and biases.
pub fn conv3d_backward_params(grad_out: &Tensor, input: &Tensor, shape: ConvShape) -> (Vec<f64>, Vec<f64>) {
    let n = input.voxels();
    let plane = input.dims[0] * input.dims[1];
    let taps = shape.taps();
    let mut gw = vec![0.0; shape.weight_len()];
    for (z0, z1) in slabs(input.dims) {
        let m = (z1 - z0) * plane;
        let cols = im2col(input, shape, z0, z1);
        let off = z0 * plane;
        gemm(
            shape.out_channels,
            m,
            taps,
            (&grad_out.data[off..], n, 1),
            (&cols, 1, m),
            1.0,
            (&mut gw, taps, 1),
        );
    }
    let gb = (0..shape.out_channels)
        .map(|co| grad_out.data[co * n..(co + 1) * n].iter().sum())
        .collect();
    (gw, gb)
}
