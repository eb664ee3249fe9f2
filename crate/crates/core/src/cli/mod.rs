//! The `lpqsm` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 bad data or configuration,
//! 4 numerical failure.

mod jobs;
mod manifest;
mod orient;
mod qvol;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{QsmError, Result};

pub use jobs::{
    AcqConfig, EvaluateJob, GeneratorSpec, Job, Method, PhaseInput, ReconstructJob, SimulateJob, TrainJob, TrainSource,
};
pub use manifest::{read_manifest, replay, run_job, ExperimentManifest, FileRecord};
pub use orient::{read_orientation, write_orientation, OrientationFile, H_NORM_TOL};
pub use qvol::{quantize, qvol_from_bytes, qvol_to_bytes, read_qvol, write_qvol, QVOL_MAGIC};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "lpqsm", version, about = "Susceptibility maps from MR local phase")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a phantom and simulate one phase image per orientation.
    Simulate {
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        acq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert one or more phase images.
    Reconstruct(ReconstructArgs),
    /// Train the learned proximal network.
    Train(TrainArgs),
    /// Compare a reconstruction with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay {
        manifest: PathBuf,
        /// Write outputs here instead of their recorded locations.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Phase image; pair each with an --orientation in the same order.
    #[arg(long = "phase", required = true)]
    phases: Vec<PathBuf>,
    #[arg(long = "orientation", required = true)]
    orientations: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Kernel threshold (tkd, cosmos).
    #[arg(long)]
    threshold: Option<f64>,
    /// Gradient step size (pgd-l1, lpcnn).
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of updates (pgd-l1, lpcnn).
    #[arg(long)]
    iterations: Option<usize>,
    /// Soft threshold per update (pgd-l1).
    #[arg(long)]
    tau: Option<f64>,
    /// Trained network weights (lpcnn).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output of `simulate`, or a directory of such outputs.
    #[arg(long, required_unless_present = "generator", conflicts_with = "generator")]
    dataset: Option<PathBuf>,
    /// JSON description of randomly generated pairs.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Training configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to the weight path plus `.losses.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(QsmError),
}

impl From<QsmError> for CliError {
    fn from(e: QsmError) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) => exit_code_for(e),
        }
    }
}

/// Exit code for a library error.
pub fn exit_code_for(e: &QsmError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

pub(crate) fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| QsmError::io(path, e))?;
    let mut hex = String::with_capacity(64);
    for b in Sha256::digest(&bytes) {
        write!(hex, "{b:02x}").unwrap();
    }
    Ok(hex)
}

/// Writes through a temporary file in the same directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| QsmError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| QsmError::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(QsmError::io(path, e));
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|source| QsmError::Json {
        context: format!("serialising {}", path.display()),
        source,
    })?;
    text.push(b'\n');
    write_atomic(path, &text)
}

/// Parses JSON, naming the offending field and position on failure.
pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| QsmError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        QsmError::Json {
            context: format!("{} at field `{field}`", path.display()),
            source: e.into_inner(),
        }
    })?;
    de.end().map_err(|source| QsmError::Json {
        context: path.display().to_string(),
        source,
    })?;
    Ok(value)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| QsmError::io(p, e))
}

fn build_job(command: Command) -> std::result::Result<Job, CliError> {
    Ok(match command {
        Command::Simulate { phantom, acq, out } => Job::Simulate(SimulateJob {
            phantom: read_json(&phantom)?,
            acquisition: read_json(&acq)?,
            out_dir: absolute(&out)?,
        }),
        Command::Reconstruct(a) => {
            if a.phases.len() != a.orientations.len() {
                return Err(CliError::Usage(format!(
                    "{} --phase but {} --orientation arguments",
                    a.phases.len(),
                    a.orientations.len()
                )));
            }
            let inputs = a
                .phases
                .iter()
                .zip(&a.orientations)
                .map(|(p, o)| {
                    Ok(PhaseInput {
                        phase: absolute(p)?,
                        orientation: absolute(o)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let job = ReconstructJob {
                method: a.method,
                inputs,
                output: absolute(&a.out)?,
                threshold: a.threshold,
                alpha: a.alpha,
                iterations: a.iterations,
                tau: a.tau,
                weights: a.weights.as_deref().map(absolute).transpose()?,
            };
            Job::Reconstruct(job.resolve().map_err(CliError::Usage)?)
        }
        Command::Train(a) => {
            let source = match (a.dataset, a.generator) {
                (Some(dir), None) => TrainSource::Dataset { dir: absolute(&dir)? },
                (None, Some(g)) => TrainSource::Generator(read_json(&g)?),
                _ => return Err(CliError::Usage("give exactly one of --dataset and --generator".into())),
            };
            let output = absolute(&a.out)?;
            let history = match a.history {
                Some(h) => absolute(&h)?,
                None => TrainJob::default_history(&output),
            };
            Job::Train(TrainJob {
                source,
                config: read_json(&a.config)?,
                output,
                history,
            })
        }
        Command::Evaluate { pred, gt, mask, out } => Job::Evaluate(EvaluateJob {
            prediction: absolute(&pred)?,
            reference: absolute(&gt)?,
            mask: mask.as_deref().map(absolute).transpose()?,
            output: absolute(&out)?,
        }),
        Command::Replay { .. } => unreachable!("replay is handled before job construction"),
    })
}

fn dispatch(command: Command) -> std::result::Result<PathBuf, CliError> {
    if let Command::Replay { manifest, out_dir } = command {
        let m = read_manifest(&manifest)?;
        let out_dir = out_dir.as_deref().map(absolute).transpose()?;
        return Ok(replay(&m, out_dir.as_deref())?.0);
    }
    let job = build_job(command)?;
    Ok(run_job(&job)?.0)
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command) {
        Ok(manifest) => {
            log::info!("manifest written to {}", manifest.display());
            EXIT_OK
        }
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Lib(err) => eprintln!("error: {err}"),
            }
            e.exit_code()
        }
    }
}
