use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::SpatialAttention;
use super::layers::{Conv2d, ConvNormAct, Downsample, Linear, ResBlock, TimeEmbedding, Upsample};
use super::params::ParamStore;
use super::NetError;
use crate::rem_data::MIN_SIDE;

/// Layer plan of the conditional U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Encoder levels (0 = full resolution) followed by self-attention.
    pub attention_levels: Vec<usize>,
    pub time_dim: usize,
    pub groups: usize,
    pub heads: usize,
    pub env_dim: usize,
}

impl DenoiserConfig {
    /// 64/128/256-channel pyramid with two residual blocks per scale,
    /// attention at the quarter-resolution level and in the bottleneck.
    pub fn standard(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            attention_levels: vec![2],
            time_dim: 256,
            groups: 8,
            heads: 4,
            env_dim: 0,
        }
    }

    /// Same layer plan with a narrower trunk, for CPU-only runs.
    pub fn compact(height: usize, width: usize) -> Self {
        Self {
            base_channels: 16,
            time_dim: 64,
            ..Self::standard(height, width)
        }
    }

    /// Narrowest trunk that still exercises every layer; for tests and
    /// smoke runs.
    pub fn tiny(height: usize, width: usize) -> Self {
        Self {
            base_channels: 8,
            time_dim: 32,
            ..Self::standard(height, width)
        }
    }

    pub fn with_env_dim(mut self, env_dim: usize) -> Self {
        self.env_dim = env_dim;
        self
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    /// Side lengths must survive one halving per level plus the bottleneck.
    pub fn required_divisor(&self) -> usize {
        1 << (self.channel_mults.len() + 1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.channel_mults.is_empty() {
            return bad("at least one pyramid level is required".into());
        }
        let div = self.required_divisor();
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return bad(format!("map {}x{} is below the minimum side", self.height, self.width));
        }
        if self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "H={} and W={} must be divisible by {div}",
                self.height, self.width
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad(format!("time embedding dim {} must be even", self.time_dim));
        }
        if self.res_blocks == 0 {
            return bad("at least one residual block per scale is required".into());
        }
        for c in self.level_channels() {
            if c == 0 || c % self.groups != 0 {
                return bad(format!("{c} channels not divisible into {} groups", self.groups));
            }
        }
        let deepest = *self.level_channels().last().expect("non-empty");
        for &l in &self.attention_levels {
            let Some(&c) = self.level_channels().get(l) else {
                return bad(format!("attention level {l} does not exist"));
            };
            if c % self.heads != 0 {
                return bad(format!("{c} channels not divisible into {} heads", self.heads));
            }
        }
        if self.heads == 0 || deepest % self.heads != 0 {
            return bad(format!("{deepest} channels not divisible into {} heads", self.heads));
        }
        Ok(())
    }
}

struct EncoderLevel {
    down: Option<Downsample>,
    stem: ConvNormAct,
    blocks: Vec<ResBlock>,
    attn: Option<SpatialAttention>,
}

struct DecoderLevel {
    up: Upsample,
    blocks: Vec<ResBlock>,
}

/// Noise predictor `ε_θ([x_t ⊕ Ĉ], t)` with optional auxiliary features.
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    time: TimeEmbedding,
    env_lift: Option<Linear>,
    encoder: Vec<EncoderLevel>,
    mid_down: Downsample,
    mid: (ResBlock, SpatialAttention, ResBlock),
    decoder: Vec<DecoderLevel>,
    head: ConvNormAct,
    out: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut ps = ParamStore::new(seed);
        let d = config.time_dim;
        let g = config.groups;
        let chans = config.level_channels();
        let time = TimeEmbedding::new(&mut ps, "time", d)?;
        let env_lift = match config.env_dim {
            0 => None,
            p => Some(Linear::new(&mut ps, "env_lift", p, d)?),
        };

        let mut encoder = Vec::new();
        let mut c_prev = 2;
        for (l, &c) in chans.iter().enumerate() {
            let down = if l > 0 {
                Some(Downsample::new(&mut ps, &format!("enc{l}.down"), c_prev)?)
            } else {
                None
            };
            let stem = ConvNormAct::new(&mut ps, &format!("enc{l}.stem"), c_prev, c, g)?;
            let blocks = (0..config.res_blocks)
                .map(|k| ResBlock::new(&mut ps, &format!("enc{l}.res{k}"), c, c, d, g))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let attn = if config.attention_levels.contains(&l) {
                Some(SpatialAttention::new(&mut ps, &format!("enc{l}.attn"), c, config.heads)?)
            } else {
                None
            };
            encoder.push(EncoderLevel {
                down,
                stem,
                blocks,
                attn,
            });
            c_prev = c;
        }

        let mid_down = Downsample::new(&mut ps, "mid.down", c_prev)?;
        let mid = (
            ResBlock::new(&mut ps, "mid.res0", c_prev, c_prev, d, g)?,
            SpatialAttention::new(&mut ps, "mid.attn", c_prev, config.heads)?,
            ResBlock::new(&mut ps, "mid.res1", c_prev, c_prev, d, g)?,
        );

        let mut decoder = Vec::new();
        let mut c_cur = c_prev;
        for (l, &c) in chans.iter().enumerate().rev() {
            let up = Upsample::new(&mut ps, &format!("dec{l}.up"), c_cur)?;
            let mut blocks = Vec::new();
            for k in 0..config.res_blocks {
                let c_in = if k == 0 { c_cur + c } else { c };
                blocks.push(ResBlock::new(&mut ps, &format!("dec{l}.res{k}"), c_in, c, d, g)?);
            }
            decoder.push(DecoderLevel { up, blocks });
            c_cur = c;
        }

        let head = ConvNormAct::new(&mut ps, "head", c_cur, c_cur, g)?;
        let out = Conv2d::zeroed(&mut ps, "out", c_cur, 1)?;
        Ok(Self {
            config,
            params: ps,
            time,
            env_lift,
            encoder,
            mid_down,
            mid,
            decoder,
            head,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// `input: (B, 2, H, W)` holding the noisy map and the heatmap; `steps`
    /// has one diffusion step per batch row; `env: (B, P)` when configured.
    pub fn forward(&self, input: &Tensor, steps: &[f64], env: Option<&Tensor>) -> Result<Tensor, NetError> {
        let (b, c, h, w) = input.dims4()?;
        if c != 2 || h != self.config.height || w != self.config.width {
            return Err(NetError::ShapeMismatch(format!(
                "expected (B, 2, {}, {}), got {:?}",
                self.config.height,
                self.config.width,
                input.dims()
            )));
        }
        if steps.len() != b {
            return Err(NetError::ShapeMismatch(format!(
                "{} steps for a batch of {b}",
                steps.len()
            )));
        }
        if let Some(&t) = steps.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(NetError::UnknownStep(t));
        }
        let mut emb = self.time.forward(steps, self.device())?;
        match (&self.env_lift, env) {
            (Some(lift), Some(env)) => {
                if env.dims() != [b, self.config.env_dim] {
                    return Err(NetError::ShapeMismatch(format!(
                        "env features {:?}, expected ({b}, {})",
                        env.dims(),
                        self.config.env_dim
                    )));
                }
                emb = (emb + lift.forward(env)?)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(NetError::ShapeMismatch(format!(
                    "model expects {} env features",
                    self.config.env_dim
                )))
            }
            (None, Some(_)) => {
                return Err(NetError::ShapeMismatch("model has no env pathway".into()))
            }
        }

        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            if let Some(down) = &level.down {
                x = down.forward(&x)?;
            }
            x = level.stem.forward(&x)?;
            for block in &level.blocks {
                x = block.forward(&x, &emb)?;
            }
            if let Some(attn) = &level.attn {
                x = attn.forward(&x)?;
            }
            skips.push(x.clone());
        }

        x = self.mid_down.forward(&x)?;
        x = self.mid.0.forward(&x, &emb)?;
        x = self.mid.1.forward(&x)?;
        x = self.mid.2.forward(&x, &emb)?;

        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            x = level.up.forward(&x)?;
            x = Tensor::cat(&[&x, &skip], 1)?;
            for block in &level.blocks {
                x = block.forward(&x, &emb)?;
            }
        }
        Ok(self.out.forward(&self.head.forward(&x)?)?)
    }
}
