use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::unet::{Denoiser, DenoiserConfig};
use super::NetError;
use crate::rem_data::{EnvStats, ValueRange};
use crate::schedule::ScheduleParams;

pub const CHECKPOINT_FORMAT: &str = "rem-diffusion-checkpoint/1";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Everything needed to sample consistently with how the weights were
/// trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub heatmap_sigma: f64,
    pub value_range: ValueRange,
    pub env_stats: Option<EnvStats>,
    pub iteration: usize,
    pub validation_loss: Option<f64>,
    pub seed: u64,
}

impl CheckpointManifest {
    pub fn new(config: DenoiserConfig, schedule: ScheduleParams, heatmap_sigma: f64, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            height: config.height,
            width: config.width,
            config,
            schedule,
            heatmap_sigma,
            value_range: ValueRange::eight_bit(),
            env_stats: None,
            iteration: 0,
            validation_loss: None,
            seed,
        }
    }

    /// Rejects a manifest whose map size or feature count differs from
    /// what the caller will feed it. The error lists every differing field.
    pub fn check_compatible(&self, height: usize, width: usize, env_dim: usize) -> Result<(), NetError> {
        let mut diff = Vec::new();
        if self.height != height {
            diff.push(format!("H: checkpoint {} != data {height}", self.height));
        }
        if self.width != width {
            diff.push(format!("W: checkpoint {} != data {width}", self.width));
        }
        if self.config.env_dim != env_dim {
            diff.push(format!("P: checkpoint {} != data {env_dim}", self.config.env_dim));
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(NetError::Incompatible(diff.join("; ")))
        }
    }

    pub fn check_schedule(&self, schedule: &ScheduleParams) -> Result<(), NetError> {
        if &self.schedule != schedule {
            return Err(NetError::Incompatible(format!(
                "schedule: checkpoint {:?} != requested {:?}",
                self.schedule, schedule
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NetError::Incompatible(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if (self.height, self.width) != (self.config.height, self.config.width) {
            return Err(NetError::Incompatible(format!(
                "manifest H×W {}x{} disagrees with layer plan {}x{}",
                self.height, self.width, self.config.height, self.config.width
            )));
        }
        Ok(())
    }
}

/// Frozen denoiser plus its manifest.
pub struct DenoiserCheckpoint {
    pub model: Denoiser,
    pub manifest: CheckpointManifest,
    /// Content hash of the weights file.
    pub id: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn weights_id(path: &Path) -> Result<String, NetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Writes `model.safetensors` and `manifest.json` into `dir`; returns the
/// checkpoint id.
pub fn save_checkpoint(dir: &Path, model: &Denoiser, manifest: &CheckpointManifest) -> Result<String, NetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let weights = dir.join(WEIGHTS_FILE);
    model.params().save(&weights)?;
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    weights_id(&weights)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest, NetError> {
    let mpath: PathBuf = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| NetError::Manifest(format!("{}: {e}", mpath.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<DenoiserCheckpoint, NetError> {
    let manifest = read_checkpoint_manifest(dir)?;
    let model = Denoiser::new(manifest.config.clone(), manifest.seed)?;
    let weights = dir.join(WEIGHTS_FILE);
    model.params().load(&weights)?;
    let id = weights_id(&weights)?;
    Ok(DenoiserCheckpoint { model, manifest, id })
}
