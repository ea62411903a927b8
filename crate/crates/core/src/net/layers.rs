//! Building blocks of the denoiser: convolutions, normalizations, the
//! sinusoidal time embedding and FiLM-conditioned residual blocks.

use candle_core::{Result, Tensor, D};

use super::conv::conv2d;
use super::ops::{channel_affine, group_standardize, silu};
use super::params::ParamStore;

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = ps.kaiming(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        )?;
        let bias = ps.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Output projection that starts at exactly zero.
    pub fn zeroed(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.zeros(&format!("{name}.weight"), &[c_out, c_in, 1, 1])?;
        let bias = ps.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: 0,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_std(ps, name, d_in, d_out, (1.0 / d_in as f64).sqrt())
    }

    pub fn with_std(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), &[d_out, d_in], std)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    /// `x: (N, d_in) -> (N, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            candle_core::bail!("{channels} channels cannot be split into {groups} groups");
        }
        Ok(Self {
            groups,
            weight: ps.ones(&format!("{name}.weight"), &[channels])?,
            bias: ps.zeros(&format!("{name}.bias"), &[channels])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        channel_affine(
            &group_standardize(x, self.groups, self.eps)?,
            &self.weight.reshape((1, c))?,
            &self.bias.reshape((1, c))?,
        )
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.ones(&format!("{name}.weight"), &[dim])?,
            bias: ps.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)?;
        let mean = (x.sum_keepdim(D::Minus1)? / dim as f64)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim as f64)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Sinusoidal embedding `[sin(t·ω_k) …, cos(t·ω_k) …]` with
/// `ω_k = 10000^{-2k/dim}` for `k < dim/2`. Sines fill the first half.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let freq = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

/// Sinusoidal features followed by a two-layer SiLU perceptron.
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One embedding row per entry of `steps`.
    pub fn forward(&self, steps: &[f64], device: &candle_core::Device) -> Result<Tensor> {
        let raw: Vec<f32> = steps
            .iter()
            .flat_map(|&t| sinusoidal_embedding(t, self.dim))
            .map(|v| v as f32)
            .collect();
        let g = Tensor::from_vec(raw, (steps.len(), self.dim), device)?;
        self.fc2.forward(&silu(&self.fc1.forward(&g)?)?)
    }
}

/// `(1 + γ) ⊙ h + shift`, with `γ` and `shift` given per (batch, channel)
/// and broadcast over the spatial dimensions.
pub fn film_modulate(h: &Tensor, gamma: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    if gamma.dims() != [b, c] || shift.dims() != [b, c] {
        candle_core::bail!(
            "FiLM parameters {:?}/{:?} do not match feature map {:?}",
            gamma.dims(),
            shift.dims(),
            h.dims()
        );
    }
    channel_affine(h, &(gamma + 1.0)?, shift)
}

/// Affine head producing channel-wise FiLM scale and shift from the time
/// embedding.
pub struct Film {
    proj: Linear,
    channels: usize,
}

impl Film {
    pub fn new(ps: &mut ParamStore, name: &str, emb_dim: usize, channels: usize) -> Result<Self> {
        let std = 0.1 / (emb_dim as f64).sqrt();
        Ok(Self {
            proj: Linear::with_std(ps, &format!("{name}.proj"), emb_dim, 2 * channels, std)?,
            channels,
        })
    }

    /// Returns `(γ, shift)`, each `(B, C)`.
    pub fn params(&self, emb: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.proj.forward(emb)?;
        Ok((
            p.narrow(1, 0, self.channels)?,
            p.narrow(1, self.channels, self.channels)?,
        ))
    }

    pub fn forward(&self, h: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let (gamma, shift) = self.params(emb)?;
        film_modulate(h, &gamma, &shift)
    }
}

/// Conv → GroupNorm → SiLU.
pub struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, c_out, 3, 1, 1)?,
            norm: GroupNorm::new(ps, &format!("{name}.norm"), groups, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        silu(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

/// `h + R(h, e_t)` where `R` is two Conv–Norm–SiLU stages and the first
/// stage's normalized activations are FiLM-modulated by the time embedding.
/// A 1×1 projection aligns the shortcut when the channel count changes.
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    film: Film,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let shortcut = if c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.shortcut"), c_in, c_out, 1, 1, 0)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1)?,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), groups, c_out)?,
            film: Film::new(ps, &format!("{name}.film"), emb_dim, c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), groups, c_out)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?;
        let h = silu(&self.film.forward(&h, emb)?)?;
        let h = silu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        match &self.shortcut {
            Some(proj) => proj.forward(x)? + h,
            None => x + h,
        }
    }
}

/// 2×2 stride-2 convolution.
pub struct Downsample(Conv2d);

impl Downsample {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(ps, name, channels, channels, 2, 2, 0)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x)
    }
}

/// Nearest-neighbour ×2 upsampling followed by a 3×3 convolution.
pub struct Upsample(Conv2d);

impl Upsample {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(ps, name, channels, channels, 3, 1, 1)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(&upsample_nearest2x(x)?)
    }
}

/// Nearest-neighbour ×2 upsampling written as a broadcast, whose backward
/// is a plain sum.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}
