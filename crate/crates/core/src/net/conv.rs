//! 2-D convolution lowered to `im2col` + batched matmul.
//!
//! Both directions run on a single-threaded gemm over a per-sample column
//! buffer; the input gradient scatters back with `col2im`.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Visits every run of in-image taps as `(column offset, input offset,
    /// length)`; runs are contiguous on both sides when `stride == 1`.
    #[inline]
    fn for_each_run(&self, channels: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        for c in 0..channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    // valid ox satisfy 0 <= ox*s + kj - pad < in_w
                    let off = kj as isize - pad;
                    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
                    let hi_excl = {
                        let lim = self.in_w as isize - off;
                        if lim <= 0 { 0 } else { ((lim as usize).div_ceil(s)).min(ow) }
                    };
                    if lo >= hi_excl {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - pad;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + iy as usize) * self.in_w;
                        let dst_row = row * oh * ow + oy * ow;
                        if s == 1 {
                            f(dst_row + lo, (src_row as isize + lo as isize + off) as usize, hi_excl - lo);
                        } else {
                            for ox in lo..hi_excl {
                                f(dst_row + ox, (src_row as isize + (ox * s) as isize + off) as usize, 1);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], channels: usize, g: &Geometry, dst: &mut [T]) {
    dst.fill(T::zero());
    g.for_each_run(channels, |di, si, n| dst[di..di + n].copy_from_slice(&src[si..si + n]));
}

fn col2im<T: WithDType>(src: &[T], channels: usize, g: &Geometry, dst: &mut [T]) {
    g.for_each_run(channels, |ci, ii, n| {
        for (o, v) in dst[ii..ii + n].iter_mut().zip(&src[ci..ci + n]) {
            *o += *v;
        }
    });
}

/// Row-major `dst (m×n) [+]= lhs · rhs`, where `lhs` is `m×k` (or `k×m`
/// when `lhs_t`) and `rhs` is `k×n` (or `n×k` when `rhs_t`).
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    lhs: &[T],
    lhs_t: bool,
    rhs: &[T],
    rhs_t: bool,
    accumulate: bool,
) {
    assert!(dst.len() >= m * n && lhs.len() >= m * k && rhs.len() >= k * n);
    let (lhs_cs, lhs_rs) = if lhs_t { (m as isize, 1) } else { (1, k as isize) };
    let (rhs_cs, rhs_rs) = if rhs_t { (k as isize, 1) } else { (1, n as isize) };
    // SAFETY: the length assertion above bounds every index reachable from
    // the given dimensions and strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv lowering expects a contiguous tensor"),
    }
}

/// Dimensions of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    g: Geometry,
}

impl Dims {
    fn rows(&self) -> usize {
        self.c_in * self.g.kernel * self.g.kernel
    }

    fn out_px(&self) -> usize {
        let (oh, ow) = self.g.out_hw();
        oh * ow
    }

    fn in_px(&self) -> usize {
        self.g.in_h * self.g.in_w
    }

    fn pointwise(&self) -> bool {
        self.g.kernel == 1 && self.g.stride == 1 && self.g.pad == 0
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (rows, p, pin) = (self.rows(), self.out_px(), self.in_px());
        let mut y = vec![T::zero(); self.batch * self.c_out * p];
        let mut cols = vec![T::zero(); if self.pointwise() { 0 } else { rows * p }];
        for b in 0..self.batch {
            let xb = &x[b * self.c_in * pin..(b + 1) * self.c_in * pin];
            let src = if self.pointwise() {
                xb
            } else {
                im2col(xb, self.c_in, &self.g, &mut cols);
                &cols
            };
            let yb = &mut y[b * self.c_out * p..(b + 1) * self.c_out * p];
            matmul(self.c_out, p, rows, yb, w, false, src, false, false);
        }
        y
    }

    /// `∂L/∂x` from `∂L/∂y`.
    fn grad_input<T: WithDType>(&self, w: &[T], dy: &[T]) -> Vec<T> {
        let (rows, p, pin) = (self.rows(), self.out_px(), self.in_px());
        let mut dx = vec![T::zero(); self.batch * self.c_in * pin];
        let mut cols = vec![T::zero(); rows * p];
        for b in 0..self.batch {
            let dyb = &dy[b * self.c_out * p..(b + 1) * self.c_out * p];
            let dxb = &mut dx[b * self.c_in * pin..(b + 1) * self.c_in * pin];
            if self.pointwise() {
                matmul(rows, p, self.c_out, dxb, w, true, dyb, false, false);
            } else {
                matmul(rows, p, self.c_out, &mut cols, w, true, dyb, false, false);
                col2im(&cols, self.c_in, &self.g, dxb);
            }
        }
        dx
    }

    /// `∂L/∂w` from the input and `∂L/∂y`, summed over the batch.
    fn grad_weight<T: WithDType>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let (rows, p, pin) = (self.rows(), self.out_px(), self.in_px());
        let mut dw = vec![T::zero(); self.c_out * rows];
        let mut cols = vec![T::zero(); if self.pointwise() { 0 } else { rows * p }];
        for b in 0..self.batch {
            let xb = &x[b * self.c_in * pin..(b + 1) * self.c_in * pin];
            let src = if self.pointwise() {
                xb
            } else {
                im2col(xb, self.c_in, &self.g, &mut cols);
                &cols
            };
            let dyb = &dy[b * self.c_out * p..(b + 1) * self.c_out * p];
            matmul(self.c_out, rows, p, &mut dw, dyb, false, src, true, b > 0);
        }
        dw
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

struct ConvGradInput(Dims);
struct ConvGradWeight(Dims);

impl Conv2dOp {
    fn dims(&self, x: &Layout, w: &Layout) -> Result<Dims> {
        let (batch, c_in, in_h, in_w) = x.shape().dims4()?;
        let (c_out, wc_in, k, k2) = w.shape().dims4()?;
        if wc_in != c_in || k != k2 {
            candle_core::bail!(
                "conv2d weight {:?} does not fit input {:?}",
                w.shape().dims(),
                x.shape().dims()
            );
        }
        if in_h + 2 * self.pad < k || in_w + 2 * self.pad < k {
            candle_core::bail!("conv2d kernel {k} larger than padded input {in_h}x{in_w}");
        }
        Ok(Dims {
            batch,
            c_in,
            c_out,
            g: Geometry {
                kernel: k,
                stride: self.stride,
                pad: self.pad,
                in_h,
                in_w,
            },
        })
    }
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
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs only"),
        }
    };
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l1, l2)?;
        let (oh, ow) = d.g.out_hw();
        let out = dispatch2!(s1, l1, s2, l2, |x, w| d.forward(x, w));
        Ok((out, Shape::from((d.batch, d.c_out, oh, ow))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, dy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(x.layout(), w.layout())?;
        let dy = dy.contiguous()?;
        let dx = w.apply_op2_no_bwd(&dy, &ConvGradInput(d))?;
        let dw = x.apply_op2_no_bwd(&dy, &ConvGradWeight(d))?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch2!(s1, l1, s2, l2, |w, dy| d.grad_input(w, dy));
        Ok((out, Shape::from((d.batch, d.c_in, d.g.in_h, d.g.in_w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, dy| d.grad_weight(x, dy));
        let k = d.g.kernel;
        Ok((out, Shape::from((d.c_out, d.c_in, k, k))))
    }
}

/// Cross-correlation of `x: (B, C_in, H, W)` with `weight: (C_out, C_in, k, k)`
/// and an optional per-output-channel bias.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let y = x
        .contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad })?;
    match bias {
        Some(bias) => super::ops::channel_shift(&y, &bias.reshape((1, bias.elem_count()))?),
        None => Ok(y),
    }
}
