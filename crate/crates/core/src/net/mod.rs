//! The conditional U-Net noise predictor and its checkpoint format.

mod attention;
mod checkpoint;
pub mod conv;
mod layers;
pub mod ops;
mod params;
mod unet;

use std::path::PathBuf;

pub use attention::SpatialAttention;
pub use checkpoint::{
    load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest, DenoiserCheckpoint,
    CHECKPOINT_FORMAT, CHECKPOINT_MANIFEST, WEIGHTS_FILE,
};
pub use layers::{
    film_modulate, sinusoidal_embedding, upsample_nearest2x, Conv2d, ConvNormAct, Downsample, Film,
    GroupNorm, LayerNorm, Linear, ResBlock, TimeEmbedding, Upsample,
};
pub use params::ParamStore;
pub use unet::{Denoiser, DenoiserConfig};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown diffusion step {0}")]
    UnknownStep(f64),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}
