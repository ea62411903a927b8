use candle_core::{DType, Result, Tensor, D};

use super::layers::LayerNorm;
use super::params::ParamStore;

/// Multi-head self-attention over the spatial positions of a feature map,
/// applied residually after a layer norm: `X ← X + Attn(LN(X))`.
pub struct SpatialAttention {
    norm: LayerNorm,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    heads: usize,
}

impl SpatialAttention {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            candle_core::bail!("{channels} channels cannot be split into {heads} heads");
        }
        let std = (1.0 / channels as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), channels)?,
            w_q: ps.normal(&format!("{name}.w_q"), &[channels, channels], std)?,
            w_k: ps.normal(&format!("{name}.w_k"), &[channels, channels], std)?,
            w_v: ps.normal(&format!("{name}.w_v"), &[channels, channels], std)?,
            heads,
        })
    }

    /// `Softmax(QKᵀ/√d)V` on tokens `x: (B, N, C)`, with `d = C / heads`.
    /// Returns the attended tokens and the `(B, heads, N, N)` weights.
    pub fn attend(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let d = c / self.heads;
        let split = |w: &Tensor| -> Result<Tensor> {
            x.broadcast_matmul(w)?
                .reshape((b, n, self.heads, d))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(&self.w_q)?;
        let k = split(&self.w_k)?;
        let v = split(&self.w_v)?;
        let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
        // normalized in f64 so rows sum to one at f32 rounding
        let weights = candle_nn::ops::softmax(&scores.to_dtype(DType::F64)?, D::Minus1)?.to_dtype(x.dtype())?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        Ok((out, weights))
    }

    /// Residual attention on tokens `(B, N, C)`.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (attn, _) = self.attend(&self.norm.forward(x)?)?;
        x + attn
    }

    /// Residual attention on a feature map `(B, C, H, W)`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (b, c, hh, ww) = h.dims4()?;
        let tokens = h.reshape((b, c, hh * ww))?.transpose(1, 2)?.contiguous()?;
        self.forward_tokens(&tokens)?
            .transpose(1, 2)?
            .reshape((b, c, hh, ww))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn tokens(b: usize, n: usize, c: usize, seed: f32) -> Tensor {
        let v: Vec<f32> = (0..b * n * c)
            .map(|i| ((i as f32 + seed) * 0.618).sin() * 1.5)
            .collect();
        Tensor::from_vec(v, (b, n, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn single_token_reduces_to_value_projection() {
        let mut ps = ParamStore::new(1);
        let attn = SpatialAttention::new(&mut ps, "a", 8, 4).unwrap();
        let x = tokens(2, 1, 8, 0.0);
        let (out, _) = attn.attend(&x).unwrap();
        let expect = x.broadcast_matmul(&attn.w_v).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut ps = ParamStore::new(2);
        let attn = SpatialAttention::new(&mut ps, "a", 16, 4).unwrap();
        let (_, w) = attn.attend(&tokens(2, 25, 16, 3.0)).unwrap();
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(sums.len(), 2 * 4 * 25);
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut ps = ParamStore::new(0);
        assert!(SpatialAttention::new(&mut ps, "a", 10, 4).is_err());
    }

    #[test]
    fn permuting_positions_permutes_output() {
        let mut ps = ParamStore::new(5);
        let attn = SpatialAttention::new(&mut ps, "a", 16, 4).unwrap();
        let n = 20;
        let x = tokens(1, n, 16, 1.0);
        let base = attn.forward_tokens(&x).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut rng);
            let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
            let permuted_in = x.index_select(&idx, 1).unwrap();
            let out = attn.forward_tokens(&permuted_in).unwrap();
            let expect = base.index_select(&idx, 1).unwrap();
            let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-5, "{diff}");
        }
    }
}
