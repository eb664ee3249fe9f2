//! QVOL volume files.
//!
//! ```text
//! "QVOL1\0"
//! 3 × u32 LE   dims (x, y, z)
//! 3 × f32 LE   voxel size in mm
//! f32 LE       samples, x fastest
//! ```

use std::path::Path;

use crate::error::{QsmError, Result};
use crate::volume::{GridSpec, RealVolume};

pub const QVOL_MAGIC: &[u8; 6] = b"QVOL1\0";
const HEADER_LEN: usize = 6 + 12 + 12;

pub fn qvol_to_bytes(v: &RealVolume) -> Result<Vec<u8>> {
    let g = v.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(QVOL_MAGIC);
    for &d in &g.dims {
        let d =
            u32::try_from(d).map_err(|_| QsmError::InvalidGrid(format!("dimension {d} does not fit in 32 bits")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &s in &g.voxel_size {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for (pos, &x) in v.data().iter().enumerate() {
        let f = x as f32;
        if !f.is_finite() {
            let [i, j, k] = g.coords(pos);
            return Err(QsmError::NonFinite(format!(
                "sample ({i}, {j}, {k}) overflows 32-bit storage"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a QVOL image; `path` only feeds error messages.
pub fn qvol_from_bytes(bytes: &[u8], path: &Path) -> Result<RealVolume> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != QVOL_MAGIC {
        return Err(QsmError::format(path, "missing QVOL1 header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap() };
    let dims = [0, 1, 2].map(|a| u32::from_le_bytes(word(a)) as usize);
    let voxel_size = [3, 4, 5].map(|a| f32::from_le_bytes(word(a)) as f64);
    let grid = GridSpec::new(dims, voxel_size)?;
    let want = grid.len().checked_mul(4).and_then(|n| n.checked_add(HEADER_LEN));
    if want != Some(bytes.len()) {
        return Err(QsmError::format(
            path,
            format!("{} bytes for a {}x{}x{} volume", bytes.len(), dims[0], dims[1], dims[2]),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    RealVolume::new(grid, data)
}

pub fn read_qvol(path: &Path) -> Result<RealVolume> {
    let bytes = std::fs::read(path).map_err(|e| QsmError::io(path, e))?;
    qvol_from_bytes(&bytes, path)
}

pub fn write_qvol(v: &RealVolume, path: &Path) -> Result<()> {
    super::write_atomic(path, &qvol_to_bytes(v)?)
}

/// The volume as it comes back from disk.
pub fn quantize(v: &RealVolume) -> RealVolume {
    v.map(|x| x as f32 as f64)
}
