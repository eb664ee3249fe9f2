//! Fully resolved command configurations and their execution.
//!
//! A job holds everything a command needs apart from the contents of its
//! input files, so a manifest that stores the job can re-run it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::orient::{read_orientation, write_orientation, OrientationFile};
use super::qvol::{read_qvol, write_qvol};
use super::{sha256_file, write_atomic};
use crate::baselines::{cosmos_lsq, tkd, CosmosConfig, SoftThreshold, TkdConfig};
use crate::dipole::{dipole_kernel, DipoleOperator};
use crate::error::{QsmError, Result};
use crate::metrics::{Mask, MetricsReport};
use crate::phantom::{make_dataset, make_phantom, simulate_phase, AcqSpec, AcqTemplate, PhantomFamily, PhantomSpec};
use crate::proxnet::{load_params, params_to_bytes, train, LearnedProx, TrainConfig, TrainPair};
use crate::solver::{pgd_reconstruct_with, ReconConfig};
use crate::volume::RealVolume;

pub const DEFAULT_TKD_THRESHOLD: f64 = 0.2;
pub const DEFAULT_L1_TAU: f64 = 1e-3;
pub const DEFAULT_L1_ITERATIONS: usize = 50;
pub const DEFAULT_LPCNN_ITERATIONS: usize = 3;

/// Acquisition description read by `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcqConfig {
    pub orientations: Vec<OrientationFile>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateJob {
    pub phantom: PhantomSpec,
    pub acquisition: AcqConfig,
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tkd,
    Cosmos,
    PgdL1,
    Lpcnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInput {
    pub phase: PathBuf,
    pub orientation: PathBuf,
}

/// Only the fields used by `method` are present once resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructJob {
    pub method: Method,
    pub inputs: Vec<PhaseInput>,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

/// Random training pairs drawn on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: PhantomFamily,
    pub acquisition: AcqTemplate,
    pub pairs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainSource {
    /// A `simulate` output directory, or a directory of them.
    Dataset {
        dir: PathBuf,
    },
    Generator(GeneratorSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub source: TrainSource,
    pub config: TrainConfig,
    pub output: PathBuf,
    pub history: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateJob {
    pub prediction: PathBuf,
    pub reference: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    Simulate(SimulateJob),
    Reconstruct(ReconstructJob),
    Train(TrainJob),
    Evaluate(EvaluateJob),
}

/// Files touched by a run, by role.
#[derive(Debug, Default)]
pub struct Touched {
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub seeds: BTreeMap<String, u64>,
    pub weights: Option<PathBuf>,
}

fn file_name(p: &Path) -> Result<&std::ffi::OsStr> {
    p.file_name()
        .ok_or_else(|| QsmError::InvalidConfig(format!("{} has no file name", p.display())))
}

impl Job {
    pub fn command(&self) -> &'static str {
        match self {
            Job::Simulate(_) => "simulate",
            Job::Reconstruct(_) => "reconstruct",
            Job::Train(_) => "train",
            Job::Evaluate(_) => "evaluate",
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        let v = match self {
            Job::Simulate(j) => serde_json::to_value(j),
            Job::Reconstruct(j) => serde_json::to_value(j),
            Job::Train(j) => serde_json::to_value(j),
            Job::Evaluate(j) => serde_json::to_value(j),
        };
        v.expect("job configurations serialise")
    }

    pub fn from_config_json(command: &str, config: serde_json::Value) -> Result<Job> {
        let err = |source| QsmError::Json {
            context: format!("manifest config for `{command}`"),
            source,
        };
        Ok(match command {
            "simulate" => Job::Simulate(serde_json::from_value(config).map_err(err)?),
            "reconstruct" => Job::Reconstruct(serde_json::from_value(config).map_err(err)?),
            "train" => Job::Train(serde_json::from_value(config).map_err(err)?),
            "evaluate" => Job::Evaluate(serde_json::from_value(config).map_err(err)?),
            other => {
                return Err(QsmError::InvalidConfig(format!(
                    "manifest names unknown command `{other}`"
                )))
            }
        })
    }

    /// Where the manifest of this job goes.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Job::Simulate(j) => j.out_dir.join("manifest.json"),
            Job::Reconstruct(ReconstructJob { output, .. })
            | Job::Train(TrainJob { output, .. })
            | Job::Evaluate(EvaluateJob { output, .. }) => {
                let mut name = output.file_name().unwrap_or_default().to_os_string();
                name.push(".manifest.json");
                output.with_file_name(name)
            }
        }
    }

    /// Sends every output into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) -> Result<()> {
        match self {
            Job::Simulate(j) => j.out_dir = dir.to_path_buf(),
            Job::Reconstruct(j) => j.output = dir.join(file_name(&j.output)?),
            Job::Evaluate(j) => j.output = dir.join(file_name(&j.output)?),
            Job::Train(j) => {
                j.output = dir.join(file_name(&j.output)?);
                j.history = dir.join(file_name(&j.history)?);
            }
        }
        Ok(())
    }

    pub fn execute(&self) -> Result<Touched> {
        match self {
            Job::Simulate(j) => j.execute(),
            Job::Reconstruct(j) => j.execute(),
            Job::Train(j) => j.execute(),
            Job::Evaluate(j) => j.execute(),
        }
    }
}

impl SimulateJob {
    fn execute(&self) -> Result<Touched> {
        self.phantom.validate()?;
        let orientations = self
            .acquisition
            .orientations
            .iter()
            .map(OrientationFile::to_orientation)
            .collect::<Result<Vec<_>>>()?;
        let x = make_phantom(&self.phantom)?;
        let acq = AcqSpec {
            orientations: orientations.clone(),
            noise_sigma: self.acquisition.noise_sigma,
            seed: self.acquisition.seed,
            mask: None,
        };
        let ys = simulate_phase(&x, &acq)?;
        std::fs::create_dir_all(&self.out_dir).map_err(|e| QsmError::io(&self.out_dir, e))?;
        let mut t = Touched::default();
        t.seeds.insert("noise".into(), self.acquisition.seed);
        let gt = self.out_dir.join("gt.qvol");
        write_qvol(&x, &gt)?;
        t.outputs.push(("ground_truth".into(), gt));
        for (i, (y, (o, file))) in ys
            .iter()
            .zip(orientations.iter().zip(&self.acquisition.orientations))
            .enumerate()
        {
            let yp = self.out_dir.join(format!("y_{i}.qvol"));
            let op = self.out_dir.join(format!("orient_{i}.json"));
            write_qvol(y, &yp)?;
            write_orientation(o, file.label.clone(), &op)?;
            t.outputs.push((format!("phase_{i}"), yp));
            t.outputs.push((format!("orientation_{i}"), op));
        }
        Ok(t)
    }
}

impl ReconstructJob {
    /// Fills method defaults and rejects options the method does not use.
    pub fn resolve(mut self) -> std::result::Result<Self, String> {
        let l = self.inputs.len();
        if l == 0 {
            return Err("at least one --phase/--orientation pair is required".into());
        }
        let used: &[&str] = match self.method {
            Method::Tkd => &["threshold"],
            Method::Cosmos => &["threshold"],
            Method::PgdL1 => &["alpha", "iterations", "tau"],
            Method::Lpcnn => &["alpha", "iterations", "weights"],
        };
        let given = [
            ("threshold", self.threshold.is_some()),
            ("alpha", self.alpha.is_some()),
            ("iterations", self.iterations.is_some()),
            ("tau", self.tau.is_some()),
            ("weights", self.weights.is_some()),
        ];
        if let Some((name, _)) = given.iter().find(|(n, g)| *g && !used.contains(n)) {
            return Err(format!("--{name} does not apply to {:?}", self.method));
        }
        match self.method {
            Method::Tkd => {
                if l != 1 {
                    return Err(format!("tkd takes exactly one input, got {l}"));
                }
                self.threshold.get_or_insert(DEFAULT_TKD_THRESHOLD);
            }
            Method::Cosmos => {
                self.threshold.get_or_insert(CosmosConfig::default().threshold);
            }
            Method::PgdL1 => {
                self.alpha.get_or_insert(1.0);
                self.iterations.get_or_insert(DEFAULT_L1_ITERATIONS);
                self.tau.get_or_insert(DEFAULT_L1_TAU);
            }
            Method::Lpcnn => {
                if self.weights.is_none() {
                    return Err("lpcnn requires --weights".into());
                }
                self.alpha.get_or_insert(1.0);
                self.iterations.get_or_insert(DEFAULT_LPCNN_ITERATIONS);
            }
        }
        Ok(self)
    }

    fn load(&self) -> Result<(Vec<RealVolume>, Vec<DipoleOperator>)> {
        let mut ys = Vec::with_capacity(self.inputs.len());
        let mut ops = Vec::with_capacity(self.inputs.len());
        for input in &self.inputs {
            let y = read_qvol(&input.phase)?;
            if let Some(first) = ys.first() {
                let first: &RealVolume = first;
                first.grid().ensure_same(y.grid())?;
            }
            let o = read_orientation(&input.orientation)?;
            ops.push(dipole_kernel(*y.grid(), o)?);
            ys.push(y);
        }
        Ok((ys, ops))
    }

    fn execute(&self) -> Result<Touched> {
        let missing = |what: &str| QsmError::InvalidConfig(format!("{what} is not resolved"));
        let (ys, ops) = self.load()?;
        let mut t = Touched::default();
        for (i, input) in self.inputs.iter().enumerate() {
            t.inputs.push((format!("phase_{i}"), input.phase.clone()));
            t.inputs.push((format!("orientation_{i}"), input.orientation.clone()));
        }
        let x = match self.method {
            Method::Tkd => {
                if ys.len() != 1 {
                    return Err(QsmError::InvalidConfig(format!(
                        "tkd takes exactly one input, got {}",
                        ys.len()
                    )));
                }
                let threshold = self.threshold.ok_or_else(|| missing("threshold"))?;
                tkd(&ys[0], &ops[0], &TkdConfig { threshold })?
            }
            Method::Cosmos => {
                let threshold = self.threshold.ok_or_else(|| missing("threshold"))?;
                cosmos_lsq(&ys, &ops, &CosmosConfig { threshold })?
            }
            Method::PgdL1 => {
                let cfg = ReconConfig::new(
                    self.alpha.ok_or_else(|| missing("alpha"))?,
                    self.iterations.ok_or_else(|| missing("iterations"))?,
                )?;
                let prox = SoftThreshold {
                    tau: self.tau.ok_or_else(|| missing("tau"))?,
                };
                pgd_reconstruct_with(&ops, &ys, &prox, &cfg, None)?.0
            }
            Method::Lpcnn => {
                let path = self.weights.as_ref().ok_or_else(|| missing("weights"))?;
                let params = load_params(path)?;
                let cfg = ReconConfig::new(
                    self.alpha.ok_or_else(|| missing("alpha"))?,
                    self.iterations.ok_or_else(|| missing("iterations"))?,
                )?;
                if !params.shared_across_iterations && cfg.iterations > params.sets.len() {
                    return Err(QsmError::InvalidConfig(format!(
                        "{} stores {} per-iteration weight sets, {} iterations requested",
                        path.display(),
                        params.sets.len(),
                        cfg.iterations
                    )));
                }
                t.inputs.push(("weights".into(), path.clone()));
                t.weights = Some(path.clone());
                let prox = LearnedProx::new(params)?;
                pgd_reconstruct_with(&ops, &ys, &prox, &cfg, None)?.0
            }
        };
        write_qvol(&x, &self.output)?;
        t.outputs.push(("reconstruction".into(), self.output.clone()));
        Ok(t)
    }
}

/// Directories under `dir` holding `simulate` output, sorted by name;
/// `dir` itself when it is one.
fn dataset_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("gt.qvol").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| QsmError::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| QsmError::io(dir, e))?.path();
        if p.join("gt.qvol").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(QsmError::InvalidConfig(format!(
            "{} contains no simulated pairs",
            dir.display()
        )));
    }
    Ok(dirs)
}

fn load_dataset(dir: &Path, t: &mut Touched) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::new();
    for d in dataset_dirs(dir)? {
        let gt_path = d.join("gt.qvol");
        let target = read_qvol(&gt_path)?;
        t.inputs.push(("ground_truth".into(), gt_path));
        for i in 0.. {
            let yp = d.join(format!("y_{i}.qvol"));
            if !yp.is_file() {
                break;
            }
            let op_path = d.join(format!("orient_{i}.json"));
            let field = read_qvol(&yp)?;
            let op = dipole_kernel(*target.grid(), read_orientation(&op_path)?)?;
            pairs.push(TrainPair::new(field, op, target.clone())?);
            t.inputs.push((format!("phase_{i}"), yp));
            t.inputs.push((format!("orientation_{i}"), op_path));
        }
    }
    if pairs.is_empty() {
        return Err(QsmError::InvalidConfig(format!(
            "{} contains no phase images",
            dir.display()
        )));
    }
    Ok(pairs)
}

impl TrainJob {
    /// Default history path: the weight path with `.losses.csv` appended.
    pub fn default_history(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".losses.csv");
        output.with_file_name(name)
    }

    fn execute(&self) -> Result<Touched> {
        self.config.validate()?;
        let mut t = Touched::default();
        t.seeds.insert("train".into(), self.config.seed);
        let pairs = match &self.source {
            TrainSource::Dataset { dir } => load_dataset(dir, &mut t)?,
            TrainSource::Generator(g) => {
                t.seeds.insert("generator".into(), g.seed);
                make_dataset(g.pairs, &g.family, &g.acquisition, g.seed)?
                    .into_iter()
                    .map(|p| p.pair)
                    .collect()
            }
        };
        log::info!("training on {} pairs", pairs.len());
        let (params, history) = train(&pairs, &self.config)?;
        write_atomic(&self.output, &params_to_bytes(&params)?)?;
        let mut csv = String::from("epoch,learning_rate,mean_loss\n");
        for r in &history.epochs {
            csv += &format!("{},{},{}\n", r.epoch, r.learning_rate, r.mean_loss);
        }
        write_atomic(&self.history, csv.as_bytes())?;
        t.weights = Some(self.output.clone());
        t.outputs.push(("weights".into(), self.output.clone()));
        t.outputs.push(("loss_history".into(), self.history.clone()));
        Ok(t)
    }
}

impl EvaluateJob {
    fn execute(&self) -> Result<Touched> {
        let pred = read_qvol(&self.prediction)?;
        let gt = read_qvol(&self.reference)?;
        let mut t = Touched::default();
        t.inputs.push(("prediction".into(), self.prediction.clone()));
        t.inputs.push(("reference".into(), self.reference.clone()));
        let mask = match &self.mask {
            Some(p) => {
                t.inputs.push(("mask".into(), p.clone()));
                Some(Mask::from_volume(&read_qvol(p)?)?)
            }
            None => None,
        };
        let report = MetricsReport::compute(&pred, &gt, mask.as_ref())?;
        write_atomic(&self.output, report.to_csv().as_bytes())?;
        t.outputs.push(("metrics".into(), self.output.clone()));
        Ok(t)
    }
}

/// Hex SHA-256 of the weight file, for manifests.
pub fn weights_digest(t: &Touched) -> Result<Option<String>> {
    t.weights.as_deref().map(sha256_file).transpose()
}
