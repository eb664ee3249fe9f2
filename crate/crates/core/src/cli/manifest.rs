//! Experiment manifests written beside command outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::jobs::{weights_digest, Job, Touched};
use super::qvol::QVOL_MAGIC;
use super::{read_json, sha256_file, write_json};
use crate::error::{QsmError, Result};
use crate::metrics::CONVENTIONS;
use crate::proxnet::PARAMS_MAGIC;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub version: String,
    /// Container versions of the files this build writes.
    pub formats: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub conventions: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_sha256: Option<String>,
}

fn records(files: &[(String, PathBuf)]) -> Result<Vec<FileRecord>> {
    files
        .iter()
        .map(|(role, path)| {
            Ok(FileRecord {
                role: role.clone(),
                path: path.clone(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

fn formats() -> BTreeMap<String, String> {
    let name = |m: &[u8]| String::from_utf8_lossy(m).trim_end_matches('\0').to_string();
    BTreeMap::from([
        ("volume".to_string(), name(QVOL_MAGIC)),
        ("weights".to_string(), name(PARAMS_MAGIC)),
    ])
}

/// Runs `job` and writes its manifest; returns the manifest path.
pub fn run_job(job: &Job) -> Result<(PathBuf, ExperimentManifest)> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let touched: Touched = job.execute()?;
    let manifest = ExperimentManifest {
        command: job.command().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        formats: formats(),
        config: job.config_json(),
        seeds: touched.seeds.clone(),
        inputs: records(&touched.inputs)?,
        outputs: records(&touched.outputs)?,
        started_unix_seconds: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        conventions: CONVENTIONS.to_string(),
        weights_sha256: weights_digest(&touched)?,
    };
    let path = job.manifest_path();
    write_json(&path, &manifest)?;
    Ok((path, manifest))
}

pub fn read_manifest(path: &Path) -> Result<ExperimentManifest> {
    read_json(path)
}

/// Re-runs the job recorded in `manifest`, optionally into `out_dir`, and
/// checks that inputs are unchanged and outputs are byte-identical.
pub fn replay(manifest: &ExperimentManifest, out_dir: Option<&Path>) -> Result<(PathBuf, ExperimentManifest)> {
    for rec in &manifest.inputs {
        let now = sha256_file(&rec.path)?;
        if now != rec.sha256 {
            return Err(QsmError::format(
                &rec.path,
                "input changed since the manifest was written",
            ));
        }
    }
    let mut job = Job::from_config_json(&manifest.command, manifest.config.clone())?;
    if let Some(dir) = out_dir {
        job.redirect_outputs(dir)?;
    }
    let (path, fresh) = run_job(&job)?;
    if fresh.outputs.len() != manifest.outputs.len() {
        return Err(QsmError::format(&path, "replay produced a different set of outputs"));
    }
    for (old, new) in manifest.outputs.iter().zip(&fresh.outputs) {
        if old.role != new.role || old.sha256 != new.sha256 {
            return Err(QsmError::format(
                &new.path,
                format!("replayed {} differs from {}", new.role, old.path.display()),
            ));
        }
    }
    Ok((path, fresh))
}
