//! The `remdiff` command line: dataset generation, training, sampling,
//! evaluation and inspection.
//!
//! Each subcommand resolves its settings in three layers: built-in defaults,
//! then an optional TOML file (`--config`), then flags. Unknown keys are
//! rejected before any work starts. Every run leaves a `run.json` recording
//! the resolved settings and a content hash of its inputs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 I/O or
//! data error, 4 numeric failure, 5 incompatible checkpoint.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluator::{evaluate_checkpoint, write_report, EnsembleProtocol, EvalError, Protocol, SliceSpec};
use crate::net::{load_checkpoint, read_checkpoint_manifest, DenoiserConfig, NetError, CHECKPOINT_MANIFEST, WEIGHTS_FILE};
use crate::rem_data::{load_dataset, map_path, DataError, TxCoordinate, MANIFEST_FILE, METADATA_FILE};
use crate::sampler::{load_predicted, sample, store_predicted, SampleError, SampleRequest, SamplerKind, PROVENANCE_FILE};
use crate::scene::{generate_dataset, SceneError, SceneSpec};
use crate::trainer::{load_train_log, run_training, RunOptions, SplitIds, TrainConfig, TrainError, SPLIT_FILE, TRAIN_LOG};

pub const RUN_FILE: &str = "run.json";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: m.into(),
        }
    }

    fn io(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: m.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn coded(code: i32, e: &dyn std::fmt::Display) -> CliError {
    CliError {
        code,
        message: e.to_string(),
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        coded(EXIT_IO, &e)
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let code = match e {
            NetError::Incompatible(_) => EXIT_INCOMPATIBLE,
            NetError::InvalidConfig(_) => EXIT_CONFIG,
            NetError::Io { .. } | NetError::Manifest(_) => EXIT_IO,
            _ => 1,
        };
        coded(code, &e)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        let code = match e {
            SceneError::Data(_) | SceneError::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        coded(code, &e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Data(d) => d.into(),
            TrainError::NonFiniteLoss { .. } => coded(EXIT_NUMERIC, &e),
            TrainError::InvalidConfig(_) | TrainError::Schedule(_) => coded(EXIT_CONFIG, &e),
            TrainError::DiskFull(_) | TrainError::Io { .. } => coded(EXIT_IO, &e),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Net(n) => n.into(),
            SampleError::Data(d) => d.into(),
            SampleError::IncompatibleCheckpoint(_) => coded(EXIT_INCOMPATIBLE, &e),
            SampleError::InvalidRequest(_) | SampleError::OriginalRoot(_) | SampleError::Schedule(_) => {
                coded(EXIT_CONFIG, &e)
            }
            SampleError::DuplicateId(_) | SampleError::DiskFull(_) => coded(EXIT_IO, &e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Sample(s) => s.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Io { .. } | EvalError::Csv { .. } => coded(EXIT_IO, &e),
            _ => coded(EXIT_CONFIG, &e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "remdiff", version, about = "Coordinate-conditioned diffusion for radio environment maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Sample maps at a transmitter position and add them to a predicted store.
    Sample(SampleArgs),
    /// Score a checkpoint against held-out records.
    Eval(EvalArgs),
    /// Summarize a dataset, checkpoint, training run or report directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Layers {
    /// TOML file of settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lr_peak=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub layers: Layers,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of maps.
    #[arg(long)]
    pub n: Option<usize>,
    /// Side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Full-scale defaults.
    Default,
    /// Small maps on a single CPU core.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub layers: Layers,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base settings the config file and flags are layered on.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: PresetArg,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<out>/latest`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many iterations, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub layers: Layers,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub y: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// `ddpm` (all steps), `strided` (ancestral over `--steps` steps) or
    /// `ddim` (deterministic over `--steps` steps).
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Predicted-map store to append to.
    #[arg(long, default_value = "predicted")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub layers: Layers,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `report.json` and the CSV series.
    #[arg(long)]
    pub report: PathBuf,
    /// `split.json` naming the held-out records. Defaults to the one next to
    /// the checkpoint directory, else every record is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// `strided` (default), `ddim` or `ddpm`.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Repeated samples for the ensemble study; 0 disables it.
    #[arg(long)]
    pub ensemble_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Settings for `gen-data`. Unset scene fields keep the size-scaled defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub n_buildings: Option<usize>,
    pub building_min: Option<usize>,
    pub building_max: Option<usize>,
    pub path_loss_exponent: Option<f64>,
    pub p0: Option<f64>,
    pub penetration_loss: Option<f64>,
    pub noise_floor: Option<f64>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            seed: 0,
            n_buildings: None,
            building_min: None,
            building_max: None,
            path_loss_exponent: None,
            p0: None,
            penetration_loss: None,
            noise_floor: None,
        }
    }
}

impl GenDataConfig {
    pub fn spec(&self) -> SceneSpec {
        let mut s = SceneSpec::square(self.size, self.seed);
        s.n_buildings = self.n_buildings.unwrap_or(s.n_buildings);
        s.building_min = self.building_min.unwrap_or(s.building_min);
        s.building_max = self.building_max.unwrap_or(s.building_max);
        s.path_loss_exponent = self.path_loss_exponent.unwrap_or(s.path_loss_exponent);
        s.p0 = self.p0.unwrap_or(s.p0);
        s.penetration_loss = self.penetration_loss.unwrap_or(s.penetration_loss);
        s.noise_floor = self.noise_floor.unwrap_or(s.noise_floor);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerChoice {
    Ddpm,
    Strided,
    Ddim,
}

impl SamplerChoice {
    fn kind(self, steps: usize) -> SamplerKind {
        match self {
            SamplerChoice::Ddpm => SamplerKind::DdpmFull,
            SamplerChoice::Strided => SamplerKind::DdpmStrided { substeps: steps },
            SamplerChoice::Ddim => SamplerKind::Ddim { substeps: steps },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub n: usize,
    pub sampler: SamplerChoice,
    pub steps: usize,
    pub seed: u64,
    pub env: Option<Vec<f64>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            x: None,
            y: None,
            n: 1,
            sampler: SamplerChoice::Ddpm,
            steps: 50,
            seed: 0,
            env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerChoice,
    pub steps: usize,
    pub seed: u64,
    pub samples_per_record: usize,
    /// Columns for vertical slices; empty picks the size-scaled default.
    pub slice_x: Vec<usize>,
    /// Rows for horizontal slices; empty picks the size-scaled default.
    pub slice_y: Vec<usize>,
    pub ensemble_n: usize,
    /// Ensemble position; unset picks the size-scaled default.
    pub ensemble_x: Option<f64>,
    pub ensemble_y: Option<f64>,
    /// Training log to export as `loss_curve.csv`; defaults to the one next
    /// to the checkpoint directory.
    pub train_log: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerChoice::Strided,
            steps: 50,
            seed: 0,
            samples_per_record: 1,
            slice_x: Vec::new(),
            slice_y: Vec::new(),
            ensemble_n: 0,
            ensemble_x: None,
            ensemble_y: None,
            train_log: None,
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self, height: usize, width: usize) -> Protocol {
        let mut p = Protocol::scaled(height, width, self.seed);
        if !self.slice_x.is_empty() || !self.slice_y.is_empty() {
            p.slices = self
                .slice_x
                .iter()
                .map(|&x| SliceSpec::vertical(x))
                .chain(self.slice_y.iter().map(|&y| SliceSpec::horizontal(y)))
                .collect();
        }
        p.samples_per_record = self.samples_per_record;
        if self.ensemble_n > 0 {
            p = p.with_scaled_ensemble(height, width, self.ensemble_n);
            if let (Some(study), Some(x), Some(y)) = (&mut p.ensemble, self.ensemble_x, self.ensemble_y) {
                *study = EnsembleProtocol {
                    tx: TxCoordinate { x, y },
                    n_samples: self.ensemble_n,
                };
            }
        }
        p
    }
}

fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Layers `file` and then `overrides` on `base`, rejecting unknown keys.
pub fn resolve<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Path>,
    sets: &[String],
    flags: Vec<(&str, Option<toml::Value>)>,
) -> Result<T, CliError> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let parsed: toml::Table = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        table.extend(parsed);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        table.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            table.insert(k.to_string(), v);
        }
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::config(e.to_string()))
}

fn int(v: Option<impl TryInto<i64>>) -> Result<Option<toml::Value>, CliError> {
    v.map(|v| {
        v.try_into()
            .map(toml::Value::Integer)
            .map_err(|_| CliError::config("integer flag out of range"))
    })
    .transpose()
}

fn float(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn string(v: Option<&String>) -> Option<toml::Value> {
    v.map(|s| toml::Value::String(s.clone()))
}

/// One hashed input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Reproducibility record written by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    /// Digest over the sorted `(name, sha256)` pairs of `inputs`.
    pub inputs_hash: String,
}

fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn files_under(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = fs::read_dir(root).map_err(|e| CliError::io(format!("{}: {e}", root.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(format!("{}: {e}", root.display())))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Digests of every file under `root` (or `root` itself if it is a file),
/// named `label/<relative path>`.
pub fn digest_inputs(label: &str, root: &Path) -> Result<Vec<InputDigest>, CliError> {
    let mut files = Vec::new();
    if root.is_file() {
        files.push(root.to_path_buf());
    } else {
        files_under(root, &mut files)?;
    }
    let mut out = Vec::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| CliError::io(format!("{}: {e}", f.display())))?;
        let rel = f.strip_prefix(root).unwrap_or(&f);
        let name = if rel.as_os_str().is_empty() {
            label.to_string()
        } else {
            format!("{label}/{}", rel.to_string_lossy().replace('\\', "/"))
        };
        out.push(InputDigest {
            name,
            bytes: bytes.len() as u64,
            sha256: blob_digest(&bytes),
        });
    }
    Ok(out)
}

fn checkpoint_inputs(dir: &Path) -> Result<Vec<InputDigest>, CliError> {
    let mut v = digest_inputs("ckpt/model", &dir.join(WEIGHTS_FILE))?;
    v.extend(digest_inputs("ckpt/manifest", &dir.join(CHECKPOINT_MANIFEST))?);
    Ok(v)
}

fn write_run_record<C: Serialize>(
    dir: &Path,
    subcommand: &str,
    config: &C,
    seed: u64,
    layers: &Layers,
    mut inputs: Vec<InputDigest>,
) -> Result<RunRecord, CliError> {
    if let Some(c) = &layers.config {
        inputs.extend(digest_inputs("config", c)?);
    }
    inputs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for i in &inputs {
        h.update(format!("{} {}\n", i.sha256, i.name));
    }
    let record = RunRecord {
        tool: "remdiff".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: subcommand.into(),
        config: serde_json::to_value(config).expect("config serializes"),
        seed,
        inputs,
        inputs_hash: hex::encode(h.finalize()),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&record).expect("run record serializes");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(record)
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let flags = vec![("n", int(a.n)?), ("size", int(a.size)?), ("seed", int(a.seed)?)];
    let cfg: GenDataConfig = resolve(&GenDataConfig::default(), a.layers.config.as_deref(), &a.layers.set, flags)?;
    // a dataset the denoiser cannot consume is rejected up front
    DenoiserConfig::standard(cfg.size, cfg.size)
        .validate()
        .map_err(|e| CliError::config(format!("--size {}: {e}", cfg.size)))?;
    if cfg.n == 0 {
        return Err(CliError::config("--n must be at least 1"));
    }
    let spec = cfg.spec();
    let scene = generate_dataset(&spec, cfg.n, &a.out)?;
    write_run_record(&a.out, "gen-data", &cfg, cfg.seed, &a.layers, Vec::new())?;
    let m = load_dataset(&a.out)?.manifest;
    println!(
        "dataset {}: {} maps, {}x{}, {} buildings, values [{}, {}]",
        a.out.display(),
        cfg.n,
        m.height,
        m.width,
        scene.buildings.len(),
        m.value_min,
        m.value_max
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let base = match a.preset {
        PresetArg::Default => TrainConfig::default(),
        PresetArg::Desk => TrainConfig::desk(),
    };
    let flags = vec![("iterations", int(a.iterations)?), ("seed", int(a.seed)?)];
    let cfg: TrainConfig = resolve(&base, a.layers.config.as_deref(), &a.layers.set, flags)?;
    cfg.validate()?;
    let inputs = digest_inputs("data", &a.data)?;
    write_run_record(&a.out, "train", &cfg, cfg.seed, &a.layers, inputs)?;
    let outcome = run_training(
        &a.data,
        &a.out,
        &cfg,
        RunOptions {
            resume: a.resume,
            stop_after: a.stop_after,
        },
    )?;
    println!(
        "trained {} iterations; best checkpoint {} (id {}, validation loss {:.6}); log {}",
        outcome.iterations_completed,
        outcome.best_dir.display(),
        outcome.best.id,
        outcome.best.manifest.validation_loss.unwrap_or(f64::NAN),
        outcome.log_path.display()
    );
    Ok(())
}

fn sample_cmd(a: &SampleArgs) -> Result<(), CliError> {
    let flags = vec![
        ("x", float(a.x)),
        ("y", float(a.y)),
        ("n", int(a.n)?),
        ("sampler", string(a.sampler.as_ref())),
        ("steps", int(a.steps)?),
        ("seed", int(a.seed)?),
    ];
    let cfg: SampleConfig = resolve(&SampleConfig::default(), a.layers.config.as_deref(), &a.layers.set, flags)?;
    let (Some(x), Some(y)) = (cfg.x, cfg.y) else {
        return Err(CliError::config("both --x and --y are required"));
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let req = SampleRequest {
        tx: TxCoordinate { x, y },
        env: cfg.env.clone(),
        n_samples: cfg.n,
        sampler: cfg.sampler.kind(cfg.steps),
        seed: cfg.seed,
    };
    req.check(&ckpt.manifest)?;
    let records = sample(&ckpt, &req)?;
    store_predicted(&records, &a.store)?;
    write_run_record(&a.store, "sample", &cfg, cfg.seed, &a.layers, checkpoint_inputs(&a.ckpt)?)?;
    for r in &records {
        println!("{}", map_path(&a.store, &r.record.id).display());
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let flags = vec![
        ("sampler", string(a.sampler.as_ref())),
        ("steps", int(a.steps)?),
        ("seed", int(a.seed)?),
        ("ensemble_n", int(a.ensemble_n)?),
    ];
    let cfg: EvalConfig = resolve(&EvalConfig::default(), a.layers.config.as_deref(), &a.layers.set, flags)?;
    let manifest = read_checkpoint_manifest(&a.ckpt)?;
    let data_manifest = crate::rem_data::read_manifest(&a.data)?;
    manifest.check_compatible(data_manifest.height, data_manifest.width, data_manifest.env_dim)?;
    let run_dir = a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let split_path = a
        .split
        .clone()
        .or_else(|| Some(run_dir.join(SPLIT_FILE)).filter(|p| p.exists()));
    let ids = match &split_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            let split: SplitIds = serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            Some(split.eval)
        }
        None => None,
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let protocol = cfg.protocol(data_manifest.height, data_manifest.width);
    let report = evaluate_checkpoint(&ckpt, cfg.sampler.kind(cfg.steps), &a.data, ids.as_deref(), &protocol)?;
    let log = cfg
        .train_log
        .clone()
        .or_else(|| Some(run_dir.join(TRAIN_LOG)).filter(|p| p.exists()));
    let written = write_report(&report, &a.report, log.as_deref())?;
    let mut inputs = checkpoint_inputs(&a.ckpt)?;
    inputs.extend(digest_inputs("data", &a.data)?);
    if let Some(p) = &split_path {
        inputs.extend(digest_inputs("split", p)?);
    }
    write_run_record(&a.report, "eval", &cfg, cfg.seed, &a.layers, inputs)?;
    println!(
        "scored {} records ({} failed) with {}",
        report.records.len(),
        report.failures.len(),
        report.sampler
    );
    for (name, s) in &report.aggregates {
        println!("  {name}: mean {:.4}, median {:.4}, std {:.4}", s.mean, s.median, s.std);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Structured summary of whatever lives at `path`.
pub fn inspect(path: &Path) -> Result<serde_json::Value, CliError> {
    use serde_json::json;
    if path.join(TRAIN_LOG).exists() {
        let log = load_train_log(&path.join(TRAIN_LOG))?;
        let vals: Vec<(usize, f64)> = log
            .iter()
            .filter_map(|r| r.validation_loss.map(|v| (r.iteration + 1, v)))
            .collect();
        let best = vals.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1));
        return Ok(json!({
            "kind": "training_run",
            "iterations_logged": log.len(),
            "first_loss": log.first().map(|r| r.loss),
            "last_loss": log.last().map(|r| r.loss),
            "best_validation_loss": best.map(|b| b.1),
            "best_iteration": best.map(|b| b.0),
            "wall_clock_seconds": log.last().map(|r| r.wall_clock),
        }));
    }
    if path.join(WEIGHTS_FILE).exists() {
        let ckpt = load_checkpoint(path)?;
        return Ok(json!({
            "kind": "checkpoint",
            "id": ckpt.id,
            "parameters": ckpt.model.params().num_scalars(),
            "manifest": ckpt.manifest,
        }));
    }
    if path.join(crate::evaluator::REPORT_FILE).exists() {
        let p = path.join(crate::evaluator::REPORT_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        let report: crate::evaluator::EvalReport =
            serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        return Ok(json!({
            "kind": "eval_report",
            "sampler": report.sampler,
            "records": report.records.len(),
            "failures": report.failures.len(),
            "aggregates": report.aggregates,
            "ensemble": report.ensemble.is_some(),
        }));
    }
    if path.join(MANIFEST_FILE).exists() && path.join(METADATA_FILE).exists() {
        if path.join(PROVENANCE_FILE).exists() {
            let recs = load_predicted(path)?;
            let checkpoints: std::collections::BTreeSet<&str> =
                recs.iter().map(|r| r.provenance.checkpoint_id.as_str()).collect();
            return Ok(json!({
                "kind": "predicted_store",
                "records": recs.len(),
                "checkpoints": checkpoints,
            }));
        }
        let d = load_dataset(path)?;
        let xs = d.records.iter().map(|r| r.tx.x);
        let ys = d.records.iter().map(|r| r.tx.y);
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        return Ok(json!({
            "kind": "dataset",
            "manifest": d.manifest,
            "records": d.records.len(),
            "tx_x_range": span(&mut xs.into_iter()),
            "tx_y_range": span(&mut ys.into_iter()),
        }));
    }
    Err(CliError::io(format!(
        "{} is not a dataset, checkpoint, training run or report directory",
        path.display()
    )))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => {
            let v = inspect(&a.path)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            Ok(())
        }
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
