//! Binary container for trained parameters.
//!
//! ```text
//! magic    "LPCNNW1"
//! u64 LE   header length, then the JSON header
//!          {"arch": .., "shared_across_iterations": .., "weight_sets": n}
//! u64 LE   tensor count
//! tensors  per set, per layer: weight [out, in, k, k, k] then bias [out];
//!          each is u32 LE rank, rank × u64 LE dims, then f64 LE values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, ConvParams, NetWeights, ProxParams};
use crate::error::{QsmError, Result};

pub const PARAMS_MAGIC: &[u8; 7] = b"LPCNNW1";
const MAGIC_FAMILY: &[u8] = b"LPCNNW";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    shared_across_iterations: bool,
    weight_sets: usize,
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn params_to_bytes(params: &ProxParams) -> Result<Vec<u8>> {
    params.validate()?;
    let header = Header {
        arch: params.arch.clone(),
        shared_across_iterations: params.shared_across_iterations,
        weight_sets: params.sets.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|source| QsmError::Json {
        context: "weight header".into(),
        source,
    })?;
    let mut out = Vec::with_capacity(32 + json.len() + 8 * params.num_params());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let shapes = params.arch.conv_shapes();
    out.extend_from_slice(&((2 * shapes.len() * params.sets.len()) as u64).to_le_bytes());
    for set in &params.sets {
        for (layer, s) in set.layers.iter().zip(&shapes) {
            let k = s.kernel;
            put_tensor(&mut out, &[s.out_channels, s.in_channels, k, k, k], &layer.weight);
            put_tensor(&mut out, &[s.out_channels], &layer.bias);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| QsmError::format(self.path, "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, want: &[usize], what: &str) -> Result<Vec<f64>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(QsmError::format(self.path, format!("{what} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        if dims != want {
            return Err(QsmError::ArchMismatch(format!(
                "{what} has shape {dims:?}, expected {want:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| QsmError::format(self.path, "tensor too large"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a container; `path` is only used in error messages.
pub fn params_from_bytes(bytes: &[u8], path: &Path) -> Result<ProxParams> {
    if bytes.len() < PARAMS_MAGIC.len() || !bytes.starts_with(MAGIC_FAMILY) {
        return Err(QsmError::format(path, "not a network weight file"));
    }
    if &bytes[..PARAMS_MAGIC.len()] != PARAMS_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..PARAMS_MAGIC.len()]).into_owned();
        return Err(QsmError::VersionMismatch(format!(
            "{} has container {found:?}, this build reads {:?}",
            path.display(),
            String::from_utf8_lossy(PARAMS_MAGIC)
        )));
    }
    let mut r = Reader {
        bytes,
        pos: PARAMS_MAGIC.len(),
        path,
    };
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|source| QsmError::Json {
        context: format!("weight header of {}", path.display()),
        source,
    })?;
    header.arch.validate()?;
    if header.weight_sets == 0 || (header.shared_across_iterations && header.weight_sets != 1) {
        return Err(QsmError::format(
            path,
            format!("header declares {} weight sets", header.weight_sets),
        ));
    }
    let shapes = header.arch.conv_shapes();
    let count = r.u64()? as usize;
    if count != 2 * shapes.len() * header.weight_sets {
        return Err(QsmError::ArchMismatch(format!(
            "{count} tensors stored, architecture needs {}",
            2 * shapes.len() * header.weight_sets
        )));
    }
    let mut sets = Vec::with_capacity(header.weight_sets);
    for set in 0..header.weight_sets {
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let k = s.kernel;
            let weight = r.tensor(
                &[s.out_channels, s.in_channels, k, k, k],
                &format!("set {set} layer {i} weight"),
            )?;
            let bias = r.tensor(&[s.out_channels], &format!("set {set} layer {i} bias"))?;
            layers.push(ConvParams { weight, bias });
        }
        sets.push(NetWeights { layers });
    }
    if r.pos != bytes.len() {
        return Err(QsmError::format(
            path,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let params = ProxParams {
        arch: header.arch,
        shared_across_iterations: header.shared_across_iterations,
        sets,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_params(params: &ProxParams, path: &Path) -> Result<()> {
    let bytes = params_to_bytes(params)?;
    fs::write(path, bytes).map_err(|e| QsmError::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ProxParams> {
    let bytes = fs::read(path).map_err(|e| QsmError::io(path, e))?;
    params_from_bytes(&bytes, path)
}

/// Loads and checks the stored architecture against `expected`.
pub fn load_params_expecting(path: &Path, expected: &ArchSpec) -> Result<ProxParams> {
    let params = load_params(path)?;
    if &params.arch != expected {
        return Err(QsmError::ArchMismatch(format!(
            "{} stores {:?}, expected {:?}",
            path.display(),
            params.arch,
            expected
        )));
    }
    Ok(params)
}
