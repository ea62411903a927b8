//! Fused CPU kernels with analytic backward passes for the pointwise-heavy
//! parts of the denoiser: group standardization, SiLU and per-channel affine
//! maps.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused op expects a contiguous tensor"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, $f:expr) => {
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $layout)?)),
            _ => candle_core::bail!("fused op supports f32 and f64 only"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            _ => candle_core::bail!("fused op supports matching f32 or f64 inputs only"),
        }
    };
}

fn moments<T: WithDType>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Zero-mean, unit-variance standardization over each (sample, group)
/// block, without the affine part.
#[derive(Debug, Clone, Copy)]
pub struct GroupStandardize {
    pub groups: usize,
    pub eps: f64,
}

struct GroupStandardizeGrad(GroupStandardize);

impl GroupStandardize {
    fn block(&self, layout: &Layout) -> Result<usize> {
        let dims = layout.shape().dims();
        if dims.len() < 2 || dims[1] % self.groups != 0 {
            candle_core::bail!("cannot split {:?} into {} channel groups", dims, self.groups);
        }
        Ok(layout.shape().elem_count() / (dims[0] * self.groups))
    }

    fn fwd<T: WithDType>(&self, x: &[T], block: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(block) {
            let (mean, rstd) = moments(chunk, self.eps);
            out.extend(chunk.iter().map(|v| T::from_f64((v.to_f64() - mean) * rstd)));
        }
        out
    }
}

impl CustomOp1 for GroupStandardize {
    fn name(&self) -> &'static str {
        "group-standardize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let block = self.block(layout)?;
        let out = dispatch1!(storage, layout, |x| self.fwd(x, block));
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let grad = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &GroupStandardizeGrad(*self))?;
        Ok(Some(grad))
    }
}

impl GroupStandardizeGrad {
    /// `dx = rstd · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))` per block.
    fn grad<T: WithDType>(&self, x: &[T], dy: &[T], block: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for (xc, gc) in x.chunks(block).zip(dy.chunks(block)) {
            let (mean, rstd) = moments(xc, self.0.eps);
            let n = block as f64;
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for (xv, gv) in xc.iter().zip(gc) {
                let g = gv.to_f64();
                g_mean += g;
                gx_mean += g * (xv.to_f64() - mean) * rstd;
            }
            g_mean /= n;
            gx_mean /= n;
            out.extend(xc.iter().zip(gc).map(|(xv, gv)| {
                let xhat = (xv.to_f64() - mean) * rstd;
                T::from_f64(rstd * (gv.to_f64() - g_mean - xhat * gx_mean))
            }));
        }
        out
    }
}

impl CustomOp2 for GroupStandardizeGrad {
    fn name(&self) -> &'static str {
        "group-standardize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let block = self.0.block(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, dy| self.grad(x, dy, block));
        Ok((out, l1.shape().clone()))
    }
}

/// `x · sigmoid(x)`.
#[derive(Debug, Clone, Copy)]
pub struct Silu;

struct SiluGrad;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T]) -> Vec<T> {
            x.iter()
                .map(|v| {
                    let v = v.to_f64();
                    T::from_f64(v * sigmoid(v))
                })
                .collect()
        }
        Ok((dispatch1!(storage, layout, f), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let grad = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &SiluGrad)?;
        Ok(Some(grad))
    }
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T], dy: &[T]) -> Vec<T> {
            x.iter()
                .zip(dy)
                .map(|(v, g)| {
                    let v = v.to_f64();
                    let s = sigmoid(v);
                    T::from_f64(g.to_f64() * s * (1.0 + v * (1.0 - s)))
                })
                .collect()
        }
        Ok((dispatch2!(s1, l1, s2, l2, f), l1.shape().clone()))
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

pub fn group_standardize(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(GroupStandardize { groups, eps })
}

/// Layout of a `(B, C, spatial…)` tensor paired with `(S, C)` per-channel
/// coefficients, `S ∈ {1, B}`.
#[derive(Debug, Clone, Copy)]
struct ChannelDims {
    batch: usize,
    channels: usize,
    spatial: usize,
    per_sample: bool,
}

impl ChannelDims {
    fn of(x: &Shape, coef: &Shape) -> Result<Self> {
        let d = x.dims();
        if d.len() < 2 {
            candle_core::bail!("per-channel op needs a (B, C, ...) tensor, got {d:?}");
        }
        let (batch, channels) = (d[0], d[1]);
        let per_sample = match coef.dims() {
            [1, c] if *c == channels => false,
            [b, c] if *b == batch && *c == channels => true,
            other => candle_core::bail!("coefficients {other:?} do not fit {d:?}"),
        };
        Ok(Self {
            batch,
            channels,
            spatial: x.elem_count() / (batch * channels),
            per_sample,
        })
    }

    fn coef_index(&self, row: usize) -> usize {
        if self.per_sample {
            row
        } else {
            row % self.channels
        }
    }

    /// Reduces `(B·C)` row sums down to the coefficient shape.
    fn fold<T: WithDType>(&self, rows: Vec<f64>) -> Vec<T> {
        if self.per_sample {
            return rows.into_iter().map(T::from_f64).collect();
        }
        let mut out = vec![0.0; self.channels];
        for (r, v) in rows.into_iter().enumerate() {
            out[r % self.channels] += v;
        }
        out.into_iter().map(T::from_f64).collect()
    }

    fn coef_shape(&self) -> Shape {
        Shape::from((if self.per_sample { self.batch } else { 1 }, self.channels))
    }
}

/// `y = x · scale[b, c] + shift[b, c]`.
struct ChannelAffine;
/// `y = x + shift[b, c]`.
struct ChannelShift;
/// `dy · scale[b, c]`.
struct ChannelScale(ChannelDims);
/// Per-row `Σ dy`, folded to the coefficient shape.
struct ChannelSum(ChannelDims);
/// Per-row `Σ dy · x`, folded to the coefficient shape.
struct ChannelDot(ChannelDims);

fn affine_rows<T: WithDType>(x: &[T], d: ChannelDims, mut f: impl FnMut(usize, &T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (row, chunk) in x.chunks(d.spatial).enumerate() {
        let k = d.coef_index(row);
        out.extend(chunk.iter().map(|v| f(k, v)));
    }
    out
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = ChannelDims::of(l1.shape(), l2.shape())?;
        if l3.shape() != l2.shape() {
            candle_core::bail!("scale {:?} and shift {:?} differ", l2.shape(), l3.shape());
        }
        fn f<T: WithDType>(x: &[T], a: &[T], s: &[T], d: ChannelDims) -> Vec<T> {
            affine_rows(x, d, |k, v| *v * a[k] + s[k])
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(s)) => CpuStorage::F32(f(
                contiguous(x, l1)?,
                contiguous(a, l2)?,
                contiguous(s, l3)?,
                d,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(s)) => CpuStorage::F64(f(
                contiguous(x, l1)?,
                contiguous(a, l2)?,
                contiguous(s, l3)?,
                d,
            )),
            _ => candle_core::bail!("channel affine supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = ChannelDims::of(x.shape(), scale.shape())?;
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(scale, &ChannelScale(d))?;
        let dscale = dy.apply_op2_no_bwd(x, &ChannelDot(d))?;
        let dshift = dy.apply_op1_no_bwd(&ChannelSum(d))?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

impl CustomOp2 for ChannelShift {
    fn name(&self) -> &'static str {
        "channel-shift"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = ChannelDims::of(l1.shape(), l2.shape())?;
        let out = dispatch2!(s1, l1, s2, l2, |x, s: &[_]| affine_rows(x, d, |k, v| *v + s[k]));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, shift: &Tensor, _res: &Tensor, dy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = ChannelDims::of(x.shape(), shift.shape())?;
        let dshift = dy.contiguous()?.apply_op1_no_bwd(&ChannelSum(d))?;
        Ok((Some(dy.clone()), Some(dshift)))
    }
}

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, a: &[_]| affine_rows(x, d, |k, v| *v * a[k]));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0;
        fn f<T: WithDType>(dy: &[T], d: ChannelDims) -> Vec<T> {
            d.fold(
                dy.chunks(d.spatial)
                    .map(|c| c.iter().map(|v| v.to_f64()).sum())
                    .collect(),
            )
        }
        let out = dispatch1!(storage, layout, |dy| f(dy, d));
        Ok((out, d.coef_shape()))
    }
}

impl CustomOp2 for ChannelDot {
    fn name(&self) -> &'static str {
        "channel-dot"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0;
        fn f<T: WithDType>(dy: &[T], x: &[T], d: ChannelDims) -> Vec<T> {
            d.fold(
                dy.chunks(d.spatial)
                    .zip(x.chunks(d.spatial))
                    .map(|(g, v)| g.iter().zip(v).map(|(g, v)| g.to_f64() * v.to_f64()).sum())
                    .collect(),
            )
        }
        let out = dispatch2!(s1, l1, s2, l2, |dy, x| f(dy, x, d));
        Ok((out, d.coef_shape()))
    }
}

/// `x · scale + shift` with `(1, C)` or `(B, C)` coefficients broadcast over
/// the spatial dimensions.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}

/// `x + shift` with `(1, C)` or `(B, C)` coefficients.
pub fn channel_shift(x: &Tensor, shift: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&shift.contiguous()?, ChannelShift)
}
