//! ε-prediction training: batch assembly, forward noising, the denoising
//! loss, clipped AdamW updates under a warm-up/cosine learning rate,
//! frozen-draw validation and best-checkpoint selection.

mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use optim::{clip_factor, global_grad_norm, AdamW, AdamWParams, LrSchedule};

use crate::net::{
    load_checkpoint, save_checkpoint, CheckpointManifest, Denoiser, DenoiserCheckpoint, DenoiserConfig,
    NetError, ParamStore,
};
use crate::rem_data::{
    gaussian_heatmap, normalize, normalize_or_zero, split_indices, zscore_env, DataError, DatasetRecord,
    EnvStats, ValueRange,
};
use crate::sampler::load_training_pool;
use crate::schedule::{DiffusionSchedule, ScheduleError, ScheduleParams};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const BEST_DIR: &str = "best";
pub const LATEST_DIR: &str = "latest";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const STATE_FILE: &str = "train_state.json";
const NONFINITE_DUMP: &str = "nonfinite_batch.json";
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration} on batch {ids:?}")]
    NonFiniteLoss { iteration: usize, ids: Vec<String> },
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Net(NetError::Tensor(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| {
        if source.raw_os_error() == Some(28) {
            TrainError::DiskFull(path.to_path_buf())
        } else {
            TrainError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Width of the denoiser trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Standard,
    Compact,
    Tiny,
}

impl ModelPreset {
    pub fn config(self, height: usize, width: usize, env_dim: usize) -> DenoiserConfig {
        match self {
            ModelPreset::Standard => DenoiserConfig::standard(height, width),
            ModelPreset::Compact => DenoiserConfig::compact(height, width),
            ModelPreset::Tiny => DenoiserConfig::tiny(height, width),
        }
        .with_env_dim(env_dim)
    }
}

/// Map-to-`[-1, 1]` convention used when assembling batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// The dataset manifest's value range, shared by every map.
    Global,
    /// Each map's own min and max.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub validation_period: usize,
    pub checkpoint_period: usize,
    pub seed: u64,
    /// Spread of the coordinate heatmap, in pixels.
    pub sigma: f64,
    /// Share of the dataset held out for evaluation.
    pub eval_fraction: f64,
    /// Share of the remaining pool used for validation.
    pub validation_fraction: f64,
    pub model: ModelPreset,
    pub normalization: Normalization,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Also train on records from the predicted-map store.
    pub include_predicted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 16,
            lr_peak: 1e-4,
            lr_floor: 1e-6,
            warmup: 500,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            validation_period: 500,
            checkpoint_period: 1000,
            seed: 0,
            sigma: 5.0,
            eval_fraction: 0.1,
            validation_fraction: 0.05,
            model: ModelPreset::Standard,
            normalization: Normalization::Global,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            include_predicted: false,
        }
    }
}

impl TrainConfig {
    /// Small-map settings sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr_peak: 1e-3,
            warmup: 100,
            validation_period: 250,
            checkpoint_period: 500,
            model: ModelPreset::Compact,
            ..Self::default()
        }
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            ..ScheduleParams::default()
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            floor: self.lr_floor,
            warmup: self.warmup,
            total: self.iterations,
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            weight_decay: self.weight_decay,
            ..AdamWParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.iterations == 0 || self.warmup >= self.iterations {
            return bad("warmup must be shorter than the run");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(self.lr_peak > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return bad("learning rates must satisfy 0 <= floor <= peak, peak > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.validation_period == 0 || self.checkpoint_period == 0 {
            return bad("validation and checkpoint periods must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) || !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("split fractions must lie in [0, 1) and (0, 1)");
        }
        DiffusionSchedule::from_params(self.schedule_params())?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since the start of the run.
    pub wall_clock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

/// Anything that predicts noise from `[x_t ⊕ Ĉ]`.
pub trait NoisePredictor {
    fn predict(&self, input: &Tensor, steps: &[f64], env: Option<&Tensor>) -> Result<Tensor, NetError>;

    /// Trainable parameters, if any.
    fn param_store(&self) -> Option<&ParamStore> {
        None
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, input: &Tensor, steps: &[f64], env: Option<&Tensor>) -> Result<Tensor, NetError> {
        self.forward(input, steps, env)
    }

    fn param_store(&self) -> Option<&ParamStore> {
        Some(self.params())
    }
}

/// Normalized maps, heatmaps and standardized features, ready to batch.
pub struct TrainingSet {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<String>,
    x0: Vec<Vec<f32>>,
    heat: Vec<Vec<f32>>,
    env: Option<Vec<Vec<f32>>>,
}

/// Tensors for one batch; `x0` and `heat` are `(B, 1, H, W)`.
pub struct Batch {
    pub ids: Vec<String>,
    pub x0: Tensor,
    pub heat: Tensor,
    pub env: Option<Tensor>,
}

impl TrainingSet {
    pub fn prepare(
        records: &[DatasetRecord],
        range: &ValueRange,
        normalization: Normalization,
        sigma: f64,
        env_stats: Option<&EnvStats>,
    ) -> Result<Self, TrainError> {
        let Some(first) = records.first() else {
            return Err(TrainError::InvalidConfig("no records to train on".into()));
        };
        let (height, width) = (first.map.height(), first.map.width());
        let mut set = Self {
            height,
            width,
            ids: Vec::with_capacity(records.len()),
            x0: Vec::with_capacity(records.len()),
            heat: Vec::with_capacity(records.len()),
            env: env_stats.map(|_| Vec::with_capacity(records.len())),
        };
        for r in records {
            if (r.map.height(), r.map.width()) != (height, width) {
                return Err(DataError::DimensionMismatch {
                    id: r.id.clone(),
                    expected: (height, width),
                    found: (r.map.height(), r.map.width()),
                }
                .into());
            }
            let norm = match normalization {
                Normalization::Global => normalize(&r.map, range)?,
                Normalization::PerImage => {
                    let (lo, hi) = r
                        .map
                        .values()
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                    normalize_or_zero(&r.map, &ValueRange { min_val: lo, max_val: hi }, true)?
                }
            };
            set.ids.push(r.id.clone());
            set.x0.push(norm.values().iter().map(|&v| v as f32).collect());
            let h = gaussian_heatmap(r.tx, height, width, sigma)?;
            set.heat.push(h.values().iter().map(|&v| v as f32).collect());
            if let (Some(stats), Some(env)) = (env_stats, set.env.as_mut()) {
                let raw = r.env.as_deref().ok_or_else(|| {
                    DataError::MissingMetadata(format!("record {} has no env features", r.id))
                })?;
                env.push(stats.apply(raw)?.into_iter().map(|v| v as f32).collect());
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch, TrainError> {
        let (h, w, b) = (self.height, self.width, indices.len());
        let gather = |src: &Vec<Vec<f32>>| -> Vec<f32> {
            indices.iter().flat_map(|&i| src[i].iter().copied()).collect()
        };
        let dev = Device::Cpu;
        let env = match &self.env {
            Some(env) => {
                let p = env.first().map_or(0, Vec::len);
                Some(Tensor::from_vec(gather(env), (b, p), &dev)?)
            }
            None => None,
        };
        Ok(Batch {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            x0: Tensor::from_vec(gather(&self.x0), (b, 1, h, w), &dev)?,
            heat: Tensor::from_vec(gather(&self.heat), (b, 1, h, w), &dev)?,
            env,
        })
    }
}

/// Mean squared error between predicted and injected noise for a batch
/// noised to `steps` (1-based) with `eps` (`B·H·W` standard-normal draws).
pub fn batch_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    batch: &Batch,
    steps: &[usize],
    eps: &[f32],
    schedule: &DiffusionSchedule,
) -> Result<Tensor, TrainError> {
    let (b, _, h, w) = batch.x0.dims4()?;
    if steps.len() != b || eps.len() != b * h * w {
        return Err(TrainError::InvalidConfig(format!(
            "{} steps and {} noise values for a {b}x{h}x{w} batch",
            steps.len(),
            eps.len()
        )));
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &t in steps {
        let ab = schedule.alpha_bar(t)?;
        if t == 0 {
            return Err(ScheduleError::StepOutOfRange { step: t, lo: 1, hi: schedule.steps() }.into());
        }
        signal.push(ab.sqrt() as f32);
        noise.push((1.0 - ab).sqrt() as f32);
    }
    let dev = batch.x0.device();
    let eps = Tensor::from_slice(eps, (b, 1, h, w), dev)?;
    let sa = Tensor::from_vec(signal, (b, 1, 1, 1), dev)?;
    let sb = Tensor::from_vec(noise, (b, 1, 1, 1), dev)?;
    let x_t = (batch.x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?;
    let input = Tensor::cat(&[&x_t, &batch.heat], 1)?;
    let t: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
    let pred = model.predict(&input, &t, batch.env.as_ref())?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Loss, backward pass, global-norm clipping and one AdamW update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<M: NoisePredictor + ?Sized>(
    model: &M,
    opt: &mut AdamW,
    batch: &Batch,
    steps: &[usize],
    eps: &[f32],
    schedule: &DiffusionSchedule,
    lr: f64,
    clip_norm: f64,
    iteration: usize,
) -> Result<StepStats, TrainError> {
    let loss = batch_loss(model, batch, steps, eps, schedule)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let non_finite = || TrainError::NonFiniteLoss {
        iteration,
        ids: batch.ids.clone(),
    };
    if !value.is_finite() {
        return Err(non_finite());
    }
    let Some(store) = model.param_store() else {
        return Ok(StepStats {
            loss: value,
            grad_norm: 0.0,
            clipped_norm: 0.0,
        });
    };
    let grads = loss.backward()?;
    let grad_norm = global_grad_norm(store, &grads)?;
    if !grad_norm.is_finite() {
        return Err(non_finite());
    }
    let scale = clip_factor(grad_norm, clip_norm);
    opt.step(store, &grads, lr, scale)?;
    Ok(StepStats {
        loss: value,
        grad_norm,
        clipped_norm: grad_norm * scale,
    })
}

/// Step and noise draws for iteration `iteration`, reproducible from the
/// seed alone.
pub struct IterationDraws {
    pub indices: Vec<usize>,
    pub steps: Vec<usize>,
    pub eps: Vec<f32>,
}

pub fn iteration_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn draw_noise(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

pub fn draw_iteration(
    seed: u64,
    iteration: usize,
    pool: usize,
    batch: usize,
    pixels: usize,
    steps: usize,
) -> IterationDraws {
    let mut rng = iteration_rng(seed, iteration as u64);
    let indices = if batch <= pool {
        rand::seq::index::sample(&mut rng, pool, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..pool)).collect()
    };
    let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    let eps = draw_noise(&mut rng, batch * pixels);
    IterationDraws { indices, steps, eps }
}

/// Validation records with their fixed `(t, ε)` draws.
pub struct ValidationSet {
    set: TrainingSet,
    steps: Vec<usize>,
    eps: Vec<Vec<f32>>,
    chunk: usize,
}

impl ValidationSet {
    pub fn new(set: TrainingSet, seed: u64, diffusion_steps: usize, chunk: usize) -> Self {
        let mut rng = iteration_rng(seed, VALIDATION_STREAM);
        let pixels = set.height * set.width;
        let steps = (0..set.len()).map(|_| rng.random_range(1..=diffusion_steps)).collect();
        let eps = (0..set.len()).map(|_| draw_noise(&mut rng, pixels)).collect();
        Self {
            set,
            steps,
            eps,
            chunk: chunk.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// Mean per-record loss under the frozen draws.
    pub fn loss<M: NoisePredictor + ?Sized>(&self, model: &M, schedule: &DiffusionSchedule) -> Result<f64, TrainError> {
        let idx: Vec<usize> = (0..self.set.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(self.chunk) {
            let batch = self.set.batch(chunk)?;
            let steps: Vec<usize> = chunk.iter().map(|&i| self.steps[i]).collect();
            let eps: Vec<f32> = chunk.iter().flat_map(|&i| self.eps[i].iter().copied()).collect();
            let l = batch_loss(model, &batch, &steps, &eps, schedule)?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
            total += l * chunk.len() as f64;
        }
        Ok(total / self.set.len() as f64)
    }
}

/// Record ids of each partition, written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub eval: Vec<String>,
}

/// Deterministic (train, validation, eval) partition of `records`.
pub fn split_records(
    records: &[DatasetRecord],
    config: &TrainConfig,
) -> (Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let n = records.len();
    let n_eval = (n as f64 * config.eval_fraction).round() as usize;
    let (pool, eval) = split_indices(n, n_eval, config.seed);
    let n_val = ((pool.len() as f64 * config.validation_fraction).round() as usize).max(1);
    let (train, val) = split_indices(pool.len(), n_val, config.seed ^ 0x7a1d);
    let pick = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| records[i].clone()).collect::<Vec<_>>();
    (
        pick(&mut train.iter().map(|&i| pool[i])),
        pick(&mut val.iter().map(|&i| pool[i])),
        pick(&mut eval.iter().copied()),
    )
}

/// Progress kept alongside the latest checkpoint for exact resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    next_iteration: usize,
    best_validation: Option<f64>,
    best_iteration: Option<usize>,
    wall_clock: f64,
    config: TrainConfig,
}

/// Controls for interrupting and resuming a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `out/latest` if present.
    pub resume: bool,
    /// Stop (after writing a resumable checkpoint) once this many
    /// iterations are complete.
    pub stop_after: Option<usize>,
}

/// What a finished (or interrupted) run produced.
pub struct TrainOutcome {
    pub best: DenoiserCheckpoint,
    pub best_dir: PathBuf,
    pub log_path: PathBuf,
    pub final_validation_loss: f64,
    pub iterations_completed: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                DataError::Json {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

/// Reads a training log back.
pub fn load_train_log(path: &Path) -> Result<Vec<TrainLogRecord>, TrainError> {
    read_log(path)
}

/// Runs `config.iterations` steps on the dataset at `data_root`, writing
/// checkpoints, the split and the log under `out`.
pub fn run_training(data_root: &Path, out: &Path, config: &TrainConfig, opts: RunOptions) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let schedule = DiffusionSchedule::from_params(config.schedule_params())?;
    let pool = load_training_pool(data_root, config.include_predicted)?;
    let range = pool.manifest.value_range()?;
    let (train, val, eval) = split_records(&pool.records, config);
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("split leaves no training records".into()));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let ids = |rs: &[DatasetRecord]| rs.iter().map(|r| r.id.clone()).collect();
    write_json(
        &out.join(SPLIT_FILE),
        &SplitIds {
            train: ids(&train),
            validation: ids(&val),
            eval: ids(&eval),
        },
    )?;

    let env_stats = if pool.manifest.env_dim > 0 {
        let vectors = train
            .iter()
            .map(|r| {
                r.env
                    .clone()
                    .ok_or_else(|| DataError::MissingMetadata(format!("record {} has no env features", r.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(zscore_env(&vectors)?.1)
    } else {
        None
    };
    let train_set = TrainingSet::prepare(&train, &range, config.normalization, config.sigma, env_stats.as_ref())?;
    let val_set = ValidationSet::new(
        TrainingSet::prepare(&val, &range, config.normalization, config.sigma, env_stats.as_ref())?,
        config.seed,
        config.diffusion_steps,
        config.batch_size,
    );
    let (h, w) = (train_set.height, train_set.width);
    let net_config = config.model.config(h, w, pool.manifest.env_dim);

    let mut manifest = CheckpointManifest::new(net_config.clone(), config.schedule_params(), config.sigma, config.seed);
    manifest.value_range = range;
    manifest.env_stats = env_stats.clone();

    let latest = out.join(LATEST_DIR);
    let best_dir = out.join(BEST_DIR);
    let log_path = out.join(TRAIN_LOG);

    let (model, mut opt, mut state) = if opts.resume && latest.join(STATE_FILE).exists() {
        let text = fs::read_to_string(latest.join(STATE_FILE)).map_err(io_err(&latest))?;
        let state: ResumeState = serde_json::from_str(&text).map_err(|e| DataError::Json {
            path: latest.join(STATE_FILE),
            reason: e.to_string(),
        })?;
        if state.config != *config {
            return Err(TrainError::InvalidConfig(
                "resume requested with a config that differs from the interrupted run".into(),
            ));
        }
        let ckpt = load_checkpoint(&latest)?;
        ckpt.manifest.check_compatible(h, w, pool.manifest.env_dim)?;
        let opt = AdamW::load(config.adamw(), &latest.join(OPTIMIZER_FILE), ckpt.model.params())?;
        let kept: Vec<TrainLogRecord> = read_log(&log_path)?
            .into_iter()
            .filter(|r| r.iteration < state.next_iteration)
            .collect();
        rewrite_log(&log_path, &kept)?;
        (ckpt.model, opt, state)
    } else {
        rewrite_log(&log_path, &[])?;
        let state = ResumeState {
            next_iteration: 0,
            best_validation: None,
            best_iteration: None,
            wall_clock: 0.0,
            config: config.clone(),
        };
        (Denoiser::new(net_config, config.seed)?, AdamW::new(config.adamw()), state)
    };

    let lr = config.lr_schedule();
    let started = Instant::now();
    let clock_offset = state.wall_clock;
    let mut log = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let end = opts.stop_after.map_or(config.iterations, |s| s.min(config.iterations));
    let mut last_validation = None;

    for it in state.next_iteration..end {
        let draws = draw_iteration(config.seed, it, train_set.len(), config.batch_size, h * w, config.diffusion_steps);
        let batch = train_set.batch(&draws.indices)?;
        let rate = lr.at(it);
        let stats = match train_step(&model, &mut opt, &batch, &draws.steps, &draws.eps, &schedule, rate, config.clip_norm, it) {
            Err(TrainError::NonFiniteLoss { iteration, ids }) => {
                write_json(&out.join(NONFINITE_DUMP), &serde_json::json!({ "iteration": iteration, "ids": ids }))?;
                return Err(TrainError::NonFiniteLoss { iteration, ids });
            }
            other => other?,
        };
        let done = it + 1;
        let validation_loss = if done % config.validation_period == 0 || done == config.iterations {
            let v = val_set.loss(&model, &schedule)?;
            last_validation = Some(v);
            if state.best_validation.is_none_or(|b| v < b) {
                state.best_validation = Some(v);
                state.best_iteration = Some(done);
                let mut m = manifest.clone();
                m.iteration = done;
                m.validation_loss = Some(v);
                save_checkpoint(&best_dir, &model, &m)?;
            }
            Some(v)
        } else {
            None
        };
        let record = TrainLogRecord {
            iteration: it,
            loss: stats.loss,
            lr: rate,
            grad_norm: stats.grad_norm,
            wall_clock: clock_offset + started.elapsed().as_secs_f64(),
            validation_loss,
        };
        let line = serde_json::to_string(&record).expect("log record serializes");
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        state.next_iteration = done;
        if done % config.checkpoint_period == 0 || done == end {
            state.wall_clock = clock_offset + started.elapsed().as_secs_f64();
            let mut m = manifest.clone();
            m.iteration = done;
            m.validation_loss = last_validation;
            save_checkpoint(&latest, &model, &m)?;
            opt.save(&latest.join(OPTIMIZER_FILE))?;
            write_json(&latest.join(STATE_FILE), &state)?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;

    let final_validation_loss = match last_validation {
        Some(v) => v,
        None => val_set.loss(&model, &schedule)?,
    };
    if !best_dir.join(crate::net::WEIGHTS_FILE).exists() {
        let mut m = manifest.clone();
        m.iteration = state.next_iteration;
        m.validation_loss = Some(final_validation_loss);
        save_checkpoint(&best_dir, &model, &m)?;
    }
    Ok(TrainOutcome {
        best: load_checkpoint(&best_dir)?,
        best_dir,
        log_path,
        final_validation_loss,
        iterations_completed: state.next_iteration,
    })
}

fn rewrite_log(path: &Path, records: &[TrainLogRecord]) -> Result<(), TrainError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}
