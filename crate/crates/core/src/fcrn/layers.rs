//! Forward and backward kernels for single-image `[C,H,W]` maps.

use crate::error::{Error, Result};
use crate::fcrn::Upsample;
use crate::tensor::{Real, Tensor};

/// Square convolution with "same" zero padding: output extent is
/// `ceil(input / stride)` along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// 1x1, stride 1: the input already is the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Output positions `o` in `[lo, hi)` whose tap `o*stride + offset` is inside `[0, n)`.
#[inline]
fn valid_range(offset: isize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (n as isize - offset + s - 1).div_euclid(s);
    let lo = lo.clamp(0, out as isize) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds `input` into a `[C*k*k, Ho*Wo]` patch matrix.
pub fn im2col<T: Real>(input: &[T], h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_extent(h), g.out_extent(w));
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut col = vec![T::zero(); g.patch_len() * ho * wo];
    for c in 0..g.in_channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let oy_off = (ky * g.dilation) as isize - pad;
            let (y_lo, y_hi) = valid_range(oy_off, g.stride, h, ho);
            for kx in 0..k {
                let ox_off = (kx * g.dilation) as isize - pad;
                let (x_lo, x_hi) = valid_range(ox_off, g.stride, w, wo);
                if x_lo == x_hi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in y_lo..y_hi {
                    let iy = (oy * g.stride) as isize + oy_off;
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = (x_lo as isize + ox_off) as usize;
                        dst_row[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            dst_row[ox] = src_row[((ox * g.stride) as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im<T: Real>(col: &[T], h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_extent(h), g.out_extent(w));
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut out = vec![T::zero(); g.in_channels * h * w];
    for c in 0..g.in_channels {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let oy_off = (ky * g.dilation) as isize - pad;
            let (y_lo, y_hi) = valid_range(oy_off, g.stride, h, ho);
            for kx in 0..k {
                let ox_off = (kx * g.dilation) as isize - pad;
                let (x_lo, x_hi) = valid_range(ox_off, g.stride, w, wo);
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in y_lo..y_hi {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let dst_row = &mut dst[iy * w..(iy + 1) * w];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for ox in x_lo..x_hi {
                        let ix = ((ox * g.stride) as isize + ox_off) as usize;
                        dst_row[ix] += src_row[ox];
                    }
                }
            }
        }
    }
    out
}

/// Returns the output map and the patch matrix (`None` for pointwise convs,
/// whose patch matrix is the input itself).
pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let (c, h, w) = input.chw()?;
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            g.in_channels
        )));
    }
    let (ho, wo) = (g.out_extent(h), g.out_extent(w));
    let n = ho * wo;
    let kk = g.patch_len();
    let col = if g.is_pointwise() {
        None
    } else {
        Some(im2col(input.data(), h, w, g))
    };
    let patches: &[T] = col.as_deref().unwrap_or(input.data());
    let mut out = vec![T::zero(); g.out_channels * n];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(b[oc]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        g.out_channels,
        kk,
        n,
        T::one(),
        weight,
        (kk as isize, 1),
        patches,
        (n as isize, 1),
        beta,
        &mut out,
        (n as isize, 1),
    );
    Ok((Tensor::new(vec![g.out_channels, ho, wo], out)?, col))
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    col: Option<&[T]>,
    weight: &[T],
    g: &ConvGeom,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
) -> Result<Tensor<T>> {
    let (_, h, w) = input.chw()?;
    let (oc, ho, wo) = grad_out.chw()?;
    if oc != g.out_channels || ho != g.out_extent(h) || wo != g.out_extent(w) {
        return Err(Error::Shape(format!(
            "conv backward: upstream {:?} does not match geometry",
            grad_out.dims()
        )));
    }
    let n = ho * wo;
    let kk = g.patch_len();
    let patches = col.unwrap_or(input.data());
    let dy = grad_out.data();
    // dW += dY * patches^T
    T::gemm(
        g.out_channels,
        n,
        kk,
        T::one(),
        dy,
        (n as isize, 1),
        patches,
        (1, n as isize),
        T::one(),
        grad_weight,
        (kk as isize, 1),
    );
    if let Some(gb) = grad_bias {
        for (o, chunk) in dy.chunks_exact(n).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            gb[o] += s;
        }
    }
    // dPatches = W^T * dY
    let mut dcol = vec![T::zero(); kk * n];
    T::gemm(
        kk,
        g.out_channels,
        n,
        T::one(),
        weight,
        (1, kk as isize),
        dy,
        (n as isize, 1),
        T::zero(),
        &mut dcol,
        (n as isize, 1),
    );
    let dx = if g.is_pointwise() {
        dcol
    } else {
        col2im(&dcol, h, w, g)
    };
    Tensor::new(input.dims().to_vec(), dx)
}

pub fn affine_forward<T: Real>(input: &Tensor<T>, scale: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let n = h * w;
    let mut out = input.clone();
    for ch in 0..c {
        let (s, b) = (scale[ch], bias[ch]);
        for v in &mut out.data_mut()[ch * n..(ch + 1) * n] {
            *v = *v * s + b;
        }
    }
    Ok(out)
}

pub fn affine_backward<T: Real>(
    input: &Tensor<T>,
    scale: &[T],
    grad_out: &Tensor<T>,
    grad_scale: &mut [T],
    grad_bias: &mut [T],
) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let n = h * w;
    let mut dx = grad_out.clone();
    for ch in 0..c {
        let x = &input.data()[ch * n..(ch + 1) * n];
        let dy = &grad_out.data()[ch * n..(ch + 1) * n];
        let (mut ds, mut db) = (T::zero(), T::zero());
        for (&xi, &gi) in x.iter().zip(dy) {
            ds += xi * gi;
            db += gi;
        }
        grad_scale[ch] += ds;
        grad_bias[ch] += db;
        for v in &mut dx.data_mut()[ch * n..(ch + 1) * n] {
            *v *= scale[ch];
        }
    }
    Ok(dx)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (g, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Per-axis interpolation taps: `(lo, hi, weight_lo, weight_hi)` for each output index.
fn axis_taps(out: usize, src: usize, stride: usize, mode: Upsample) -> Vec<(usize, usize, f64, f64)> {
    (0..out)
        .map(|y| match mode {
            Upsample::Nearest => {
                let i = ((y + stride / 2) / stride).min(src - 1);
                (i, i, 1.0, 0.0)
            }
            Upsample::Bilinear => {
                // coarse cell i is centred on input pixel i * stride
                let u = y as f64 / stride as f64;
                let i0 = (u.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let f = if i1 == i0 { 0.0 } else { u - i0 as f64 };
                (i0, i1, 1.0 - f, f)
            }
        })
        .collect()
}

/// Brings a stride-`s` map to `out_h x out_w`.
pub fn upsample_forward<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    stride: usize,
    mode: Upsample,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let ty = axis_taps(out_h, h, stride, mode);
    let tx = axis_taps(out_w, w, stride, mode);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                d[y * out_w + x] = if mode == Upsample::Nearest {
                    s[y0 * w + x0]
                } else {
                    let (wy0, wy1, wx0, wx1) = (T::lit(wy0), T::lit(wy1), T::lit(wx0), T::lit(wx1));
                    wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                        + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1])
                };
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    mode: Upsample,
) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad_out.chw()?;
    let ty = axis_taps(out_h, in_h, stride, mode);
    let tx = axis_taps(out_w, in_w, stride, mode);
    let mut dx = Tensor::zeros(&[c, in_h, in_w]);
    let g = grad_out.data();
    let dst = dx.data_mut();
    for ch in 0..c {
        let gs = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let d = &mut dst[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = gs[y * out_w + x];
                if mode == Upsample::Nearest {
                    d[y0 * in_w + x0] += v;
                } else {
                    d[y0 * in_w + x0] += T::lit(wy0 * wx0) * v;
                    d[y0 * in_w + x1] += T::lit(wy0 * wx1) * v;
                    d[y1 * in_w + x0] += T::lit(wy1 * wx0) * v;
                    d[y1 * in_w + x1] += T::lit(wy1 * wx1) * v;
                }
            }
        }
    }
    Ok(dx)
}
