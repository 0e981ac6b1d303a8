//! Raw forward and backward kernels for convolution and max pooling.
//!
//! Convolution is cross-correlation (no kernel flip). Layouts are
//! `[C, H, W]` for feature maps and `[C_out, C_in, k, k]` for kernels.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Geometry of a convolution, checked once and shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvShape {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let (&[c_in, h, w], &[c_out, kc, k, k2]) = (input, kernel) else {
            return Err(TensorError::dim(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,k,k] kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != c_in {
            return Err(TensorError::dim(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::dim(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(TensorError::dim("stride must be at least 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::dim(format!(
                "kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvShape {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output columns `ox` for which `ox*stride + kx - pad` lands inside the row.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ix < w  <=>  ox*stride < w + pad - kx
        let limit = (self.w + self.pad).saturating_sub(kx);
        let hi = limit.div_ceil(self.stride).min(self.out_w);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// Cross-correlation of `input` `[C_in,H,W]` with `kernel` `[C_out,C_in,k,k]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor, TensorError> {
    conv2d_forward(input, kernel, None, stride, padding)
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let s = ConvShape::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [s.c_out] {
            return Err(TensorError::dim(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                s.c_out
            )));
        }
    }
    let (x, wk) = (input.data(), kernel.data());
    let plane = s.out_h * s.out_w;
    let rows = s.c_in * s.k * s.k;
    let col = im2col(x, &s);
    let mut out = vec![0.0; s.c_out * plane];
    for o in 0..s.c_out {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            out_o.fill(b.data()[o]);
        }
        let w_o = &wk[o * rows..(o + 1) * rows];
        let mut r = 0;
        while r + 4 <= rows {
            let (w0, w1, w2, w3) = (w_o[r], w_o[r + 1], w_o[r + 2], w_o[r + 3]);
            let c0 = &col[r * plane..(r + 1) * plane];
            let c1 = &col[(r + 1) * plane..(r + 2) * plane];
            let c2 = &col[(r + 2) * plane..(r + 3) * plane];
            let c3 = &col[(r + 3) * plane..(r + 4) * plane];
            for ((((dst, a), b), c), d) in out_o.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3) {
                *dst += w0 * a + w1 * b + w2 * c + w3 * d;
            }
            r += 4;
        }
        while r < rows {
            let wv = w_o[r];
            for (dst, src) in out_o.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                *dst += wv * src;
            }
            r += 1;
        }
    }
    Tensor::new(vec![s.c_out, s.out_h, s.out_w], out)
}

/// Unfolds input patches into a `[C_in·k·k, out_h·out_w]` matrix; padding
/// reads as zero.
fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let plane = s.out_h * s.out_w;
    let mut col = vec![0.0; s.c_in * s.k * s.k * plane];
    for i in 0..s.c_in {
        let x_i = &x[i * s.h * s.w..(i + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let r = (i * s.k + ky) * s.k + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                let (lo, hi) = s.col_range(kx);
                for oy in 0..s.out_h {
                    let Some(iy) = s.in_row(oy, ky) else { continue };
                    let row = &mut dst[oy * s.out_w..(oy + 1) * s.out_w];
                    let src = &x_i[iy * s.w..(iy + 1) * s.w];
                    if s.stride == 1 {
                        let off = lo + kx - s.pad;
                        row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            row[ox] = src[ox * s.stride + kx - s.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(col: &[f64], s: &ConvShape) -> Vec<f64> {
    let plane = s.out_h * s.out_w;
    let mut x = vec![0.0; s.c_in * s.h * s.w];
    for i in 0..s.c_in {
        let x_i = &mut x[i * s.h * s.w..(i + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let r = (i * s.k + ky) * s.k + kx;
                let src = &col[r * plane..(r + 1) * plane];
                let (lo, hi) = s.col_range(kx);
                for oy in 0..s.out_h {
                    let Some(iy) = s.in_row(oy, ky) else { continue };
                    let row = &src[oy * s.out_w..(oy + 1) * s.out_w];
                    let dst = &mut x_i[iy * s.w..(iy + 1) * s.w];
                    if s.stride == 1 {
                        let off = lo + kx - s.pad;
                        for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * s.stride + kx - s.pad] += row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads, TensorError> {
    let (gx, kernel, bias) = conv_backward_impl(input, kernel, grad_out, stride, pad, true)?;
    Ok(ConvGrads {
        input: gx.expect("input gradient requested"),
        kernel,
        bias,
    })
}

/// Kernel and bias gradients only, for convolutions over constant inputs.
pub fn conv2d_backward_params(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor), TensorError> {
    let (_, k, b) = conv_backward_impl(input, kernel, grad_out, stride, pad, false)?;
    Ok((k, b))
}

fn conv_backward_impl(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), TensorError> {
    let s = ConvShape::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != [s.c_out, s.out_h, s.out_w] {
        return Err(TensorError::dim(format!(
            "upstream gradient {:?} does not match conv output [{}, {}, {}]",
            grad_out.shape(),
            s.c_out,
            s.out_h,
            s.out_w
        )));
    }
    let (x, wk, g) = (input.data(), kernel.data(), grad_out.data());
    let plane = s.out_h * s.out_w;
    let rows = s.c_in * s.k * s.k;
    let col = im2col(x, &s);
    let mut gw = vec![0.0; wk.len()];
    let mut gb = vec![0.0; s.c_out];
    for o in 0..s.c_out {
        let g_o = &g[o * plane..(o + 1) * plane];
        gb[o] = g_o.iter().sum();
        let mut r = 0;
        while r + 4 <= rows {
            let c0 = &col[r * plane..(r + 1) * plane];
            let c1 = &col[(r + 1) * plane..(r + 2) * plane];
            let c2 = &col[(r + 2) * plane..(r + 3) * plane];
            let c3 = &col[(r + 3) * plane..(r + 4) * plane];
            let mut acc = [0.0; 4];
            for ((((gv, a), b), c), d) in g_o.iter().zip(c0).zip(c1).zip(c2).zip(c3) {
                acc[0] += gv * a;
                acc[1] += gv * b;
                acc[2] += gv * c;
                acc[3] += gv * d;
            }
            gw[o * rows + r..o * rows + r + 4].copy_from_slice(&acc);
            r += 4;
        }
        while r < rows {
            let c_r = &col[r * plane..(r + 1) * plane];
            gw[o * rows + r] = g_o.iter().zip(c_r).map(|(a, b)| a * b).sum();
            r += 1;
        }
    }
    if !need_input {
        return Ok((None, Tensor::new(kernel.shape().to_vec(), gw)?, Tensor::new(vec![s.c_out], gb)?));
    }
    let mut gcol = vec![0.0; rows * plane];
    for r in 0..rows {
        let dst = &mut gcol[r * plane..(r + 1) * plane];
        let mut o = 0;
        while o + 4 <= s.c_out {
            let (w0, w1, w2, w3) = (wk[o * rows + r], wk[(o + 1) * rows + r], wk[(o + 2) * rows + r], wk[(o + 3) * rows + r]);
            let g0 = &g[o * plane..(o + 1) * plane];
            let g1 = &g[(o + 1) * plane..(o + 2) * plane];
            let g2 = &g[(o + 2) * plane..(o + 3) * plane];
            let g3 = &g[(o + 3) * plane..(o + 4) * plane];
            for ((((dv, a), b), c), d) in dst.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *dv += w0 * a + w1 * b + w2 * c + w3 * d;
            }
            o += 4;
        }
        while o < s.c_out {
            let wv = wk[o * rows + r];
            for (d, gv) in dst.iter_mut().zip(&g[o * plane..(o + 1) * plane]) {
                *d += wv * gv;
            }
            o += 1;
        }
    }
    let gx = col2im(&gcol, &s);
    Ok((
        Some(Tensor::new(input.shape().to_vec(), gx)?),
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(vec![s.c_out], gb)?,
    ))
}

/// Non-overlapping max pooling over `window x window` blocks of a `[C,H,W]` map.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Tensor, TensorError> {
    maxpool2d_forward(input, window).map(|(out, _)| out)
}

/// Forward pass that also returns, per output cell, the flat input index of
/// the maximum. Ties go to the first occurrence in row-major window order.
pub fn maxpool2d_forward(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>), TensorError> {
    let &[c, h, w] = input.shape() else {
        return Err(TensorError::dim(format!("maxpool2d expects [C,H,W], got {:?}", input.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(TensorError::dim(format!(
            "spatial dims {h}x{w} not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for dy in 0..window {
                    let row = base + (oy * window + dy) * w + ox * window;
                    for (dx, &v) in x[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor, TensorError> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::dim("maxpool gradient/argmax length mismatch"));
    }
    let n: usize = input_shape.iter().product();
    let mut gx = vec![0.0; n];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}
