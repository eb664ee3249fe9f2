//! C interface to `lpqsm`.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/reconstruction
//! calls and released with the matching `*_free`. Every function returns an
//! [`LpqsmStatus`]; on failure [`lpqsm_last_error`] describes the problem.
//! Panics are caught at the boundary and reported as `LPQSM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lpqsm::baselines::{cosmos_lsq, tkd, CosmosConfig, TkdConfig};
use lpqsm::cli::{read_qvol, write_qvol, OrientationFile};
use lpqsm::dipole::{dipole_kernel, DipoleOperator};
use lpqsm::metrics::{Mask, MetricsReport};
use lpqsm::proxnet::{load_params, LearnedProx};
use lpqsm::solver::{pgd_reconstruct_with, ReconConfig};
use lpqsm::{GridSpec, QsmError, RealVolume};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpqsmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    GridMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Panic = 7,
}

/// A real-valued volume on a grid.
pub struct LpqsmVolume(RealVolume);

/// A dipole forward operator for one grid and field direction.
pub struct LpqsmDipole(DipoleOperator);

/// A trained proximal network.
pub struct LpqsmProx(LearnedProx);

/// Image quality of a reconstruction against ground truth.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LpqsmMetrics {
    pub nrmse_percent: f64,
    /// `+inf` for identical volumes.
    pub psnr_db: f64,
    pub hfen_percent: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LpqsmStatus, String);

impl From<QsmError> for Failure {
    fn from(e: QsmError) -> Self {
        let status = match &e {
            _ if e.is_numerical() => LpqsmStatus::Numerical,
            QsmError::GridMismatch { .. } | QsmError::LengthMismatch { .. } => LpqsmStatus::GridMismatch,
            QsmError::Io { .. } => LpqsmStatus::Io,
            QsmError::Format { .. }
            | QsmError::VersionMismatch(_)
            | QsmError::ArchMismatch(_)
            | QsmError::Json { .. } => LpqsmStatus::Format,
            _ => LpqsmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LpqsmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpqsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LpqsmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LpqsmStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Failure> {
    let slot = p.as_mut().ok_or_else(|| null(what))?;
    *slot = ptr::null_mut();
    Ok(slot)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LpqsmStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn grid_arg(dims: *const usize, voxel_size: *const f64) -> Result<GridSpec, Failure> {
    let dims = deref(dims as *const [usize; 3], "dims")?;
    let voxel = deref(voxel_size as *const [f64; 3], "voxel_size")?;
    Ok(GridSpec::new(*dims, *voxel)?)
}

/// Borrowed handles from a C array of `count` pointers.
unsafe fn handles<'a, T>(p: *const *const T, count: usize, what: &str) -> Result<Vec<&'a T>, Failure> {
    if count == 0 {
        return Err(Failure(LpqsmStatus::InvalidArgument, format!("no {what} given")));
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, count)
        .iter()
        .enumerate()
        .map(|(i, &h)| h.as_ref().ok_or_else(|| null(&format!("{what}[{i}]"))))
        .collect()
}

fn boxed<T>(slot: &mut *mut T, value: T) {
    *slot = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lpqsm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a volume of `dims[0]*dims[1]*dims[2]` samples, x fastest.
/// `data` may be null for zeros.
///
/// # Safety
/// `dims` and `voxel_size` point to 3 values; `data`, if non-null, to the
/// full sample count.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_volume_new(
    dims: *const usize,
    voxel_size: *const f64,
    data: *const f64,
    out: *mut *mut LpqsmVolume,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let grid = grid_arg(dims, voxel_size)?;
        let v = if data.is_null() {
            RealVolume::zeros(grid)
        } else {
            RealVolume::new(grid, std::slice::from_raw_parts(data, grid.len()).to_vec())?
        };
        boxed(slot, LpqsmVolume(v));
        Ok(())
    })
}

/// # Safety
/// `v` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_volume_free(v: *mut LpqsmVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Writes the grid shape and voxel size (mm); either output may be null.
///
/// # Safety
/// Non-null outputs point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_volume_dims(
    v: *const LpqsmVolume,
    dims: *mut usize,
    voxel_size: *mut f64,
) -> LpqsmStatus {
    guard(|| {
        let g = deref(v, "volume")?.0.grid();
        if let Some(d) = (dims as *mut [usize; 3]).as_mut() {
            *d = g.dims;
        }
        if let Some(s) = (voxel_size as *mut [f64; 3]).as_mut() {
            *s = g.voxel_size;
        }
        Ok(())
    })
}

/// Copies the samples into `out`, which must hold exactly `len` values.
///
/// # Safety
/// `out` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_volume_copy_data(v: *const LpqsmVolume, out: *mut f64, len: usize) -> LpqsmStatus {
    guard(|| {
        let v = &deref(v, "volume")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != v.len() {
            return Err(Failure(
                LpqsmStatus::GridMismatch,
                format!("buffer holds {len} values, volume has {}", v.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(v.data());
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_qvol_read(path: *const c_char, out: *mut *mut LpqsmVolume) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let v = read_qvol(&path_arg(path)?)?;
        boxed(slot, LpqsmVolume(v));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_qvol_write(v: *const LpqsmVolume, path: *const c_char) -> LpqsmStatus {
    guard(|| {
        let v = deref(v, "volume")?;
        write_qvol(&v.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Dipole operator for B0 along `h` (unit length within 1e-6).
///
/// # Safety
/// `dims`, `voxel_size` and `h` point to 3 values each.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_dipole_new(
    dims: *const usize,
    voxel_size: *const f64,
    h: *const f64,
    out: *mut *mut LpqsmDipole,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let grid = grid_arg(dims, voxel_size)?;
        let h = *deref(h as *const [f64; 3], "h")?;
        let file = OrientationFile {
            h: Some(h),
            rotation: None,
            label: None,
        };
        boxed(slot, LpqsmDipole(dipole_kernel(grid, file.to_orientation()?)?));
        Ok(())
    })
}

/// # Safety
/// `op` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_dipole_free(op: *mut LpqsmDipole) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Simulated local field of `x`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_dipole_forward(
    op: *const LpqsmDipole,
    x: *const LpqsmVolume,
    out: *mut *mut LpqsmVolume,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let y = deref(op, "operator")?.0.forward(&deref(x, "volume")?.0)?;
        boxed(slot, LpqsmVolume(y));
        Ok(())
    })
}

/// Thresholded k-space division.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_tkd(
    y: *const LpqsmVolume,
    op: *const LpqsmDipole,
    threshold: f64,
    out: *mut *mut LpqsmVolume,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let x = tkd(
            &deref(y, "phase")?.0,
            &deref(op, "operator")?.0,
            &TkdConfig { threshold },
        )?;
        boxed(slot, LpqsmVolume(x));
        Ok(())
    })
}

/// Multi-orientation least squares over `count` phase/operator pairs.
///
/// # Safety
/// `ys` and `ops` point to `count` live handles each.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_cosmos(
    ys: *const *const LpqsmVolume,
    ops: *const *const LpqsmDipole,
    count: usize,
    threshold: f64,
    out: *mut *mut LpqsmVolume,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let ys: Vec<RealVolume> = handles(ys, count, "phases")?.into_iter().map(|v| v.0.clone()).collect();
        let ops: Vec<DipoleOperator> = handles(ops, count, "operators")?
            .into_iter()
            .map(|o| o.0.clone())
            .collect();
        boxed(slot, LpqsmVolume(cosmos_lsq(&ys, &ops, &CosmosConfig { threshold })?));
        Ok(())
    })
}

/// Loads a trained network weight file.
///
/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_prox_load(path: *const c_char, out: *mut *mut LpqsmProx) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let params = load_params(&path_arg(path)?)?;
        boxed(slot, LpqsmProx(LearnedProx::new(params)?));
        Ok(())
    })
}

/// # Safety
/// `prox` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_prox_free(prox: *mut LpqsmProx) {
    if !prox.is_null() {
        drop(Box::from_raw(prox));
    }
}

/// Learned proximal gradient descent from zero over `count` inputs.
///
/// # Safety
/// `ys` and `ops` point to `count` live handles each; `prox` is live.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_lpcnn_reconstruct(
    ys: *const *const LpqsmVolume,
    ops: *const *const LpqsmDipole,
    count: usize,
    prox: *const LpqsmProx,
    alpha: f64,
    iterations: usize,
    out: *mut *mut LpqsmVolume,
) -> LpqsmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let prox = deref(prox, "prox")?;
        let ys: Vec<RealVolume> = handles(ys, count, "phases")?.into_iter().map(|v| v.0.clone()).collect();
        let ops: Vec<DipoleOperator> = handles(ops, count, "operators")?
            .into_iter()
            .map(|o| o.0.clone())
            .collect();
        let cfg = ReconConfig::new(alpha, iterations)?;
        let (x, _) = pgd_reconstruct_with(&ops, &ys, &prox.0, &cfg, None)?;
        boxed(slot, LpqsmVolume(x));
        Ok(())
    })
}

/// NRMSE, PSNR, HFEN and SSIM of `pred` against `gt`; `mask` may be null
/// for the whole grid, otherwise its non-zero samples are used.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lpqsm_metrics(
    pred: *const LpqsmVolume,
    gt: *const LpqsmVolume,
    mask: *const LpqsmVolume,
    out: *mut LpqsmMetrics,
) -> LpqsmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mask = match mask.as_ref() {
            Some(m) => Some(Mask::from_volume(&m.0)?),
            None => None,
        };
        let r = MetricsReport::compute(&deref(pred, "prediction")?.0, &deref(gt, "reference")?.0, mask.as_ref())?;
        *out = LpqsmMetrics {
            nrmse_percent: r.nrmse_percent,
            psnr_db: r.psnr_db,
            hfen_percent: r.hfen_percent,
            ssim: r.ssim,
            mask_voxels: r.mask_voxels,
        };
        Ok(())
    })
}
