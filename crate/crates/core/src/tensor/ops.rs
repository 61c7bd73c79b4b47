//! Differentiable primitives: forward evaluation plus a context whose
//! `backward` is the vector-Jacobian product.
//!
//! Conventions shared by every spatial op:
//! * images are `[H, W, C]` row-major,
//! * conv kernels are `[k, k, Cin, Cout]`, linear weights `[D, O]`,
//! * convolutions use zero "same" padding in the TensorFlow sense
//!   (`out = ceil(in / stride)`, excess padding goes after), and
//! * bilinear sampling uses half-pixel centers with edge clamping.
//!
//! Row-parallel loops write disjoint output rows, so results are
//! bit-identical for any rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Same-padding geometry for one axis: (out, pad_begin).
#[inline]
pub fn same_pad(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = (out - 1) * stride + k;
    let total = needed.saturating_sub(len);
    (out, total / 2)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub struct Conv2dCtx<F> {
    input: Tensor<F>,
    kernel: Tensor<F>,
    stride: usize,
    pad: usize,
}

/// 2-D convolution, zero same-padding, square odd kernel.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
) -> Result<(Tensor<F>, Conv2dCtx<F>)> {
    let (h, w, cin) = dims3(input, "conv2d")?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(shape_err("conv2d", format!("bad kernel shape {ks:?}")));
    }
    let (k, kci, cout) = (ks[0], ks[2], ks[3]);
    if kci != cin {
        return Err(shape_err(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kci}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err("conv2d", format!("bad bias {:?}", bias.shape())));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be >= 1".into()));
    }
    let (oh, pad_r) = same_pad(h, k, stride);
    let (ow, pad_c) = same_pad(w, k, stride);
    debug_assert_eq!(pad_r, pad_c);

    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    let in_data = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(or, out_row)| {
            for oc in 0..ow {
                let px = &mut out_row[oc * cout..(oc + 1) * cout];
                px.copy_from_slice(bd);
                for u in 0..k {
                    let ir = (or * stride + u) as isize - pad_r as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let ic = (oc * stride + v) as isize - pad_c as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        let ibase = (ir as usize * w + ic as usize) * cin;
                        let kbase = (u * k + v) * cin * cout;
                        for ci in 0..cin {
                            let x = in_data[ibase + ci];
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, kv) in px.iter_mut().zip(krow) {
                                *o += x * *kv;
                            }
                        }
                    }
                }
            }
        });
    out.ensure_finite("conv2d")?;
    Ok((
        out,
        Conv2dCtx {
            input: input.clone(),
            kernel: kernel.clone(),
            stride,
            pad: pad_r,
        },
    ))
}

impl<F: Scalar> Conv2dCtx<F> {
    /// Returns (d_input, d_kernel, d_bias).
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let (h, w, cin) = dims3(&self.input, "conv2d_backward")?;
        let (oh, ow, cout) = dims3(g_out, "conv2d_backward")?;
        let k = self.kernel.shape()[0];
        let stride = self.stride;
        let pad = self.pad;
        let g = g_out.data();
        let kd = self.kernel.data();
        let in_data = self.input.data();

        let mut d_input = Tensor::zeros(vec![h, w, cin]);
        d_input
            .data_mut()
            .par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(r, drow)| {
                for u in 0..k {
                    let t = r as isize + pad as isize - u as isize;
                    if t < 0 || t % stride as isize != 0 {
                        continue;
                    }
                    let or = (t / stride as isize) as usize;
                    if or >= oh {
                        continue;
                    }
                    for c in 0..w {
                        for v in 0..k {
                            let s = c as isize + pad as isize - v as isize;
                            if s < 0 || s % stride as isize != 0 {
                                continue;
                            }
                            let oc = (s / stride as isize) as usize;
                            if oc >= ow {
                                continue;
                            }
                            let grow = &g[(or * ow + oc) * cout..(or * ow + oc + 1) * cout];
                            let kbase = (u * k + v) * cin * cout;
                            let dpx = &mut drow[c * cin..(c + 1) * cin];
                            for (ci, d) in dpx.iter_mut().enumerate() {
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let mut acc = F::ZERO;
                                for (gv, kv) in grow.iter().zip(krow) {
                                    acc += *gv * *kv;
                                }
                                *d += acc;
                            }
                        }
                    }
                }
            });

        let mut d_kernel = Tensor::zeros(vec![k, k, cin, cout]);
        d_kernel
            .data_mut()
            .par_chunks_mut(cin * cout)
            .enumerate()
            .for_each(|(uv, dk)| {
                let (u, v) = (uv / k, uv % k);
                for or in 0..oh {
                    let ir = (or * stride + u) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for oc in 0..ow {
                        let ic = (oc * stride + v) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        let ibase = (ir as usize * w + ic as usize) * cin;
                        let grow = &g[(or * ow + oc) * cout..(or * ow + oc + 1) * cout];
                        for ci in 0..cin {
                            let x = in_data[ibase + ci];
                            let drow = &mut dk[ci * cout..(ci + 1) * cout];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += x * *gv;
                            }
                        }
                    }
                }
            });

        let mut d_bias = Tensor::zeros(vec![cout]);
        let db = d_bias.data_mut();
        for px in g.chunks_exact(cout) {
            for (d, gv) in db.iter_mut().zip(px) {
                *d += *gv;
            }
        }
        Ok((d_input, d_kernel, d_bias))
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d (stride 2, doubles each spatial dim)
// ---------------------------------------------------------------------------

pub struct ConvTranspose2dCtx<F> {
    input: Tensor<F>,
    kernel: Tensor<F>,
}

/// Transposed convolution with 3x3 kernel and stride 2. It is the exact
/// adjoint of `conv2d(stride=2)` on the doubled grid, so `in -> 2*in`.
pub fn conv_transpose2d<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, ConvTranspose2dCtx<F>)> {
    let (h, w, cin) = dims3(input, "conv_transpose2d")?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 {
        return Err(shape_err(
            "conv_transpose2d",
            format!("kernel must be 3x3, got {ks:?}"),
        ));
    }
    if ks[2] != cin {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input has {cin} channels, kernel expects {}", ks[2]),
        ));
    }
    let cout = ks[3];
    if bias.shape() != [cout] {
        return Err(shape_err(
            "conv_transpose2d",
            format!("bad bias {:?}", bias.shape()),
        ));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    let x = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    // Equivalent forward conv (2h -> h) has pad_begin 0, so r = 2i + u.
    out.data_mut()
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(r, out_row)| {
            for (oc_px, px) in out_row.chunks_exact_mut(cout).enumerate() {
                px.copy_from_slice(bd);
                for u in 0..3usize {
                    if r < u || (r - u) % 2 != 0 {
                        continue;
                    }
                    let i = (r - u) / 2;
                    if i >= h {
                        continue;
                    }
                    for v in 0..3usize {
                        if oc_px < v || (oc_px - v) % 2 != 0 {
                            continue;
                        }
                        let j = (oc_px - v) / 2;
                        if j >= w {
                            continue;
                        }
                        let ibase = (i * w + j) * cin;
                        let kbase = (u * 3 + v) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, kv) in px.iter_mut().zip(krow) {
                                *o += xv * *kv;
                            }
                        }
                    }
                }
            }
        });
    out.ensure_finite("conv_transpose2d")?;
    Ok((
        out,
        ConvTranspose2dCtx {
            input: input.clone(),
            kernel: kernel.clone(),
        },
    ))
}

impl<F: Scalar> ConvTranspose2dCtx<F> {
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let (h, w, cin) = dims3(&self.input, "conv_transpose2d_backward")?;
        let (oh, ow, cout) = dims3(g_out, "conv_transpose2d_backward")?;
        let g = g_out.data();
        let kd = self.kernel.data();
        let x = self.input.data();

        // d_input[i,j,ci] = sum_{u,v,co} g[2i+u, 2j+v, co] * K[u,v,ci,co]
        let mut d_input = Tensor::zeros(vec![h, w, cin]);
        d_input
            .data_mut()
            .par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(i, drow)| {
                for j in 0..w {
                    let dpx = &mut drow[j * cin..(j + 1) * cin];
                    for u in 0..3usize {
                        let r = 2 * i + u;
                        if r >= oh {
                            continue;
                        }
                        for v in 0..3usize {
                            let c = 2 * j + v;
                            if c >= ow {
                                continue;
                            }
                            let grow = &g[(r * ow + c) * cout..(r * ow + c + 1) * cout];
                            let kbase = (u * 3 + v) * cin * cout;
                            for (ci, d) in dpx.iter_mut().enumerate() {
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let mut acc = F::ZERO;
                                for (gv, kv) in grow.iter().zip(krow) {
                                    acc += *gv * *kv;
                                }
                                *d += acc;
                            }
                        }
                    }
                }
            });

        let mut d_kernel = Tensor::zeros(vec![3, 3, cin, cout]);
        d_kernel
            .data_mut()
            .par_chunks_mut(cin * cout)
            .enumerate()
            .for_each(|(uv, dk)| {
                let (u, v) = (uv / 3, uv % 3);
                for i in 0..h {
                    let r = 2 * i + u;
                    if r >= oh {
                        continue;
                    }
                    for j in 0..w {
                        let c = 2 * j + v;
                        if c >= ow {
                            continue;
                        }
                        let ibase = (i * w + j) * cin;
                        let grow = &g[(r * ow + c) * cout..(r * ow + c + 1) * cout];
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            let drow = &mut dk[ci * cout..(ci + 1) * cout];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += xv * *gv;
                            }
                        }
                    }
                }
            });

        let mut d_bias = Tensor::zeros(vec![cout]);
        let db = d_bias.data_mut();
        for px in g.chunks_exact(cout) {
            for (d, gv) in db.iter_mut().zip(px) {
                *d += *gv;
            }
        }
        Ok((d_input, d_kernel, d_bias))
    }
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub struct AvgPool2dCtx {
    in_h: usize,
    in_w: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Average pooling with explicit zero padding counted in the divisor.
pub fn avg_pool2d<F: Scalar>(
    input: &Tensor<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, AvgPool2dCtx)> {
    let (h, w, c) = dims3(input, "avg_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(shape_err("avg_pool2d", "kernel and stride must be >= 1".into()));
    }
    let oh = out_dim(h, kernel, stride, pad)?;
    let ow = out_dim(w, kernel, stride, pad)?;
    let inv = F::ONE / F::from_f64((kernel * kernel) as f64);
    let mut out = Tensor::zeros(vec![oh, ow, c]);
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(or, out_row)| {
            for oc in 0..ow {
                let px = &mut out_row[oc * c..(oc + 1) * c];
                for u in 0..kernel {
                    let ir = (or * stride + u) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for v in 0..kernel {
                        let ic = (oc * stride + v) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        let ibase = (ir as usize * w + ic as usize) * c;
                        for (o, xv) in px.iter_mut().zip(&x[ibase..ibase + c]) {
                            *o += *xv;
                        }
                    }
                }
                for o in px.iter_mut() {
                    *o *= inv;
                }
            }
        });
    out.ensure_finite("avg_pool2d")?;
    Ok((
        out,
        AvgPool2dCtx {
            in_h: h,
            in_w: w,
            channels: c,
            kernel,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        },
    ))
}

impl AvgPool2dCtx {
    pub fn backward<F: Scalar>(&self, g_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (c, k) = (self.channels, self.kernel);
        let inv = F::ONE / F::from_f64((k * k) as f64);
        let g = g_out.data();
        let (ow, oh) = (self.out_w, self.out_h);
        let mut d_input = Tensor::zeros(vec![self.in_h, self.in_w, c]);
        let (w, stride, pad) = (self.in_w, self.stride, self.pad);
        d_input
            .data_mut()
            .par_chunks_mut(w * c)
            .enumerate()
            .for_each(|(r, drow)| {
                for u in 0..k {
                    let t = r as isize + pad as isize - u as isize;
                    if t < 0 || t % stride as isize != 0 {
                        continue;
                    }
                    let or = (t / stride as isize) as usize;
                    if or >= oh {
                        continue;
                    }
                    for ccol in 0..w {
                        for v in 0..k {
                            let s = ccol as isize + pad as isize - v as isize;
                            if s < 0 || s % stride as isize != 0 {
                                continue;
                            }
                            let oc = (s / stride as isize) as usize;
                            if oc >= ow {
                                continue;
                            }
                            let gbase = (or * ow + oc) * c;
                            let dpx = &mut drow[ccol * c..(ccol + 1) * c];
                            for (d, gv) in dpx.iter_mut().zip(&g[gbase..gbase + c]) {
                                *d += *gv * inv;
                            }
                        }
                    }
                }
            });
        Ok(d_input)
    }
}

pub struct MaxPool2dCtx {
    in_h: usize,
    in_w: usize,
    channels: usize,
    /// Winning window slot (u*2+v) per output element; first index wins ties.
    argmax: Vec<u8>,
}

/// 2x2 max pooling with stride 2; requires even spatial dims.
pub fn max_pool2d<F: Scalar>(input: &Tensor<F>) -> Result<(Tensor<F>, MaxPool2dCtx)> {
    let (h, w, c) = dims3(input, "max_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "max_pool2d",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Tensor::zeros(vec![oh, ow, c]);
    let mut argmax = vec![0u8; oh * ow * c];
    out.data_mut()
        .chunks_mut(ow * c)
        .zip(argmax.chunks_mut(ow * c))
        .enumerate()
        .for_each(|(or, (out_row, arg_row))| {
            for oc in 0..ow {
                for ch in 0..c {
                    let mut best = F::from_f64(f64::NEG_INFINITY);
                    let mut slot = 0u8;
                    for u in 0..2usize {
                        for v in 0..2usize {
                            let val = x[((or * 2 + u) * w + oc * 2 + v) * c + ch];
                            if val > best {
                                best = val;
                                slot = (u * 2 + v) as u8;
                            }
                        }
                    }
                    out_row[oc * c + ch] = best;
                    arg_row[oc * c + ch] = slot;
                }
            }
        });
    out.ensure_finite("max_pool2d")?;
    Ok((
        out,
        MaxPool2dCtx {
            in_h: h,
            in_w: w,
            channels: c,
            argmax,
        },
    ))
}

impl MaxPool2dCtx {
    pub fn backward<F: Scalar>(&self, g_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w, c) = (self.in_h, self.in_w, self.channels);
        let (oh, ow) = (h / 2, w / 2);
        let g = g_out.data();
        let mut d_input = Tensor::zeros(vec![h, w, c]);
        let d = d_input.data_mut();
        for or in 0..oh {
            for oc in 0..ow {
                for ch in 0..c {
                    let idx = (or * ow + oc) * c + ch;
                    let slot = self.argmax[idx] as usize;
                    let (u, v) = (slot / 2, slot % 2);
                    d[((or * 2 + u) * w + oc * 2 + v) * c + ch] += g[idx];
                }
            }
        }
        Ok(d_input)
    }
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

/// Half-pixel-center source coordinate with edge clamp: returns
/// (lo, hi, t) so the sample is `x[lo] + t * (x[hi] - x[lo])`.
#[inline]
pub fn bilinear_axis(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub struct BilinearCtx {
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
}

pub fn bilinear_resize<F: Scalar>(
    input: &Tensor<F>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<F>, BilinearCtx)> {
    let (h, w, c) = dims3(input, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("bilinear_resize", "zero output dim".into()));
    }
    let x = input.data();
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    out.data_mut()
        .par_chunks_mut(out_w * c)
        .enumerate()
        .for_each(|(or, out_row)| {
            let (y0, y1, ty) = bilinear_axis(or, h, out_h);
            let ty = F::from_f64(ty);
            for oc in 0..out_w {
                let (x0, x1, tx) = bilinear_axis(oc, w, out_w);
                let tx = F::from_f64(tx);
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                let px = &mut out_row[oc * c..(oc + 1) * c];
                for (ch, o) in px.iter_mut().enumerate() {
                    let a = x[p00 + ch];
                    let b = x[p01 + ch];
                    let cc = x[p10 + ch];
                    let d = x[p11 + ch];
                    let top = a + tx * (b - a);
                    let bot = cc + tx * (d - cc);
                    *o = top + ty * (bot - top);
                }
            }
        });
    out.ensure_finite("bilinear_resize")?;
    Ok((
        out,
        BilinearCtx {
            in_h: h,
            in_w: w,
            channels: c,
            out_h,
            out_w,
        },
    ))
}

impl BilinearCtx {
    pub fn backward<F: Scalar>(&self, g_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w, c) = (self.in_h, self.in_w, self.channels);
        let g = g_out.data();
        let mut d_input = Tensor::zeros(vec![h, w, c]);
        let d = d_input.data_mut();
        // Scatter onto shared corners; kept serial for determinism.
        for or in 0..self.out_h {
            let (y0, y1, ty) = bilinear_axis(or, h, self.out_h);
            for oc in 0..self.out_w {
                let (x0, x1, tx) = bilinear_axis(oc, w, self.out_w);
                let w00 = F::from_f64((1.0 - ty) * (1.0 - tx));
                let w01 = F::from_f64((1.0 - ty) * tx);
                let w10 = F::from_f64(ty * (1.0 - tx));
                let w11 = F::from_f64(ty * tx);
                let gbase = (or * self.out_w + oc) * c;
                for ch in 0..c {
                    let gv = g[gbase + ch];
                    d[(y0 * w + x0) * c + ch] += gv * w00;
                    d[(y0 * w + x1) * c + ch] += gv * w01;
                    d[(y1 * w + x0) * c + ch] += gv * w10;
                    d[(y1 * w + x1) * c + ch] += gv * w11;
                }
            }
        }
        Ok(d_input)
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub struct LeakyReluCtx<F> {
    input: Tensor<F>,
    alpha: F,
}

pub fn leaky_relu<F: Scalar>(input: &Tensor<F>, alpha: F) -> Result<(Tensor<F>, LeakyReluCtx<F>)> {
    let out = input.map(|x| if x >= F::ZERO { x } else { alpha * x });
    out.ensure_finite("leaky_relu")?;
    Ok((
        out,
        LeakyReluCtx {
            input: input.clone(),
            alpha,
        },
    ))
}

impl<F: Scalar> LeakyReluCtx<F> {
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<Tensor<F>> {
        let mut d = g_out.clone();
        for (dv, xv) in d.data_mut().iter_mut().zip(self.input.data()) {
            if *xv < F::ZERO {
                *dv *= self.alpha;
            }
        }
        Ok(d)
    }
}

/// Numerically stable softplus: `max(x,0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus_scalar<F: Scalar>(x: F) -> F {
    x.maximum(F::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the softplus derivative.
#[inline]
pub fn logistic_scalar<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

pub struct SoftplusCtx<F> {
    input: Tensor<F>,
}

pub fn softplus<F: Scalar>(input: &Tensor<F>) -> Result<(Tensor<F>, SoftplusCtx<F>)> {
    let out = input.map(softplus_scalar);
    out.ensure_finite("softplus")?;
    Ok((
        out,
        SoftplusCtx {
            input: input.clone(),
        },
    ))
}

impl<F: Scalar> SoftplusCtx<F> {
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<Tensor<F>> {
        let mut d = g_out.clone();
        for (dv, xv) in d.data_mut().iter_mut().zip(self.input.data()) {
            *dv *= logistic_scalar(*xv);
        }
        Ok(d)
    }
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Packed running state for one batch-norm layer: `[mean(C) | var(C) | count]`.
pub fn bn_state_init<F: Scalar>(channels: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(vec![2 * channels + 1]);
    for v in &mut t.data_mut()[channels..2 * channels] {
        *v = F::ONE;
    }
    t
}

pub struct BatchNormCtx<F> {
    normalized: Tensor<F>,
    gamma: Tensor<F>,
    inv_std: Vec<F>,
    n: usize,
    mode: BnMode,
}

/// Per-channel batch normalization over all leading dims (channels last).
/// Train mode uses batch statistics and folds them into the running state
/// with exponential decay; infer mode reads the running state.
pub fn batch_norm<F: Scalar>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    state: &mut Tensor<F>,
    mode: BnMode,
    decay: f64,
) -> Result<(Tensor<F>, BatchNormCtx<F>)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| shape_err("batch_norm", "rank-0 input".into()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batch_norm",
            format!("gamma/beta must be [{c}]"),
        ));
    }
    if state.len() != 2 * c + 1 {
        return Err(shape_err(
            "batch_norm",
            format!("state must be [{}]", 2 * c + 1),
        ));
    }
    let n = input.len() / c;
    let eps = F::from_f64(BN_EPS);
    let x = input.data();

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![F::ZERO; c];
            for px in x.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(px) {
                    *m += *v;
                }
            }
            let inv_n = F::ONE / F::from_f64(n as f64);
            for m in &mut mean {
                *m *= inv_n;
            }
            let mut var = vec![F::ZERO; c];
            for px in x.chunks_exact(c) {
                for ((vv, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = *v - *m;
                    *vv += d * d;
                }
            }
            for v in &mut var {
                *v *= inv_n;
            }
            // Exponential running-average update.
            let d = F::from_f64(decay);
            let omd = F::ONE - d;
            let sd = state.data_mut();
            for ch in 0..c {
                sd[ch] = d * sd[ch] + omd * mean[ch];
                sd[c + ch] = d * sd[c + ch] + omd * var[ch];
            }
            sd[2 * c] += F::ONE;
            (mean, var)
        }
        BnMode::Infer => {
            let sd = state.data();
            if sd[2 * c] == F::ZERO {
                log::warn!("batch_norm: inference before any training update; using init stats");
            }
            (sd[..c].to_vec(), sd[c..2 * c].to_vec())
        }
    };

    let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape().to_vec());
    {
        let nd = normalized.data_mut();
        for (px, npx) in x.chunks_exact(c).zip(nd.chunks_exact_mut(c)) {
            for ch in 0..c {
                npx[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            }
        }
    }
    let mut out = Tensor::zeros(input.shape().to_vec());
    {
        let od = out.data_mut();
        let gd = gamma.data();
        let bd = beta.data();
        for (npx, opx) in normalized.data().chunks_exact(c).zip(od.chunks_exact_mut(c)) {
            for ch in 0..c {
                opx[ch] = gd[ch] * npx[ch] + bd[ch];
            }
        }
    }
    out.ensure_finite("batch_norm")?;
    Ok((
        out,
        BatchNormCtx {
            normalized,
            gamma: gamma.clone(),
            inv_std,
            n,
            mode,
        },
    ))
}

impl<F: Scalar> BatchNormCtx<F> {
    /// Returns (d_input, d_gamma, d_beta).
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let c = self.gamma.len();
        let g = g_out.data();
        let xn = self.normalized.data();
        let mut d_gamma = vec![F::ZERO; c];
        let mut d_beta = vec![F::ZERO; c];
        for (gpx, npx) in g.chunks_exact(c).zip(xn.chunks_exact(c)) {
            for ch in 0..c {
                d_gamma[ch] += gpx[ch] * npx[ch];
                d_beta[ch] += gpx[ch];
            }
        }
        let mut d_input = Tensor::zeros(g_out.shape().to_vec());
        let gd = self.gamma.data();
        match self.mode {
            BnMode::Train => {
                let inv_n = F::ONE / F::from_f64(self.n as f64);
                let d = d_input.data_mut();
                for ((dpx, gpx), npx) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xn.chunks_exact(c))
                {
                    for ch in 0..c {
                        let term = gpx[ch] - (d_beta[ch] + npx[ch] * d_gamma[ch]) * inv_n;
                        dpx[ch] = gd[ch] * self.inv_std[ch] * term;
                    }
                }
            }
            BnMode::Infer => {
                let d = d_input.data_mut();
                for (dpx, gpx) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for ch in 0..c {
                        dpx[ch] = gpx[ch] * gd[ch] * self.inv_std[ch];
                    }
                }
            }
        }
        Ok((
            d_input,
            Tensor::new(vec![c], d_gamma)?,
            Tensor::new(vec![c], d_beta)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

pub struct LinearCtx<F> {
    input: Tensor<F>,
    weight: Tensor<F>,
    rank1: bool,
}

/// Affine map over the last axis: `[P, D] x [D, O] + [O] -> [P, O]`
/// (a rank-1 input is treated as a single row).
pub fn linear<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, LinearCtx<F>)> {
    let rank1 = input.shape().len() == 1;
    let (p, d) = match input.shape() {
        [d] => (1usize, *d),
        [p, d] => (*p, *d),
        s => return Err(shape_err("linear", format!("bad input shape {s:?}"))),
    };
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != d {
        return Err(shape_err(
            "linear",
            format!("weight {ws:?} incompatible with input dim {d}"),
        ));
    }
    let o = ws[1];
    if bias.shape() != [o] {
        return Err(shape_err("linear", format!("bad bias {:?}", bias.shape())));
    }
    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(if rank1 { vec![o] } else { vec![p, o] });
    out.data_mut()
        .par_chunks_mut(o)
        .enumerate()
        .for_each(|(row, opx)| {
            opx.copy_from_slice(bd);
            let xrow = &x[row * d..(row + 1) * d];
            for (di, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[di * o..(di + 1) * o];
                for (ov, wv) in opx.iter_mut().zip(wrow) {
                    *ov += xv * *wv;
                }
            }
        });
    out.ensure_finite("linear")?;
    Ok((
        out,
        LinearCtx {
            input: input.clone(),
            weight: weight.clone(),
            rank1,
        },
    ))
}

impl<F: Scalar> LinearCtx<F> {
    /// Returns (d_input, d_weight, d_bias).
    pub fn backward(&self, g_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let d = if self.rank1 {
            self.input.shape()[0]
        } else {
            self.input.shape()[1]
        };
        let o = self.weight.shape()[1];
        let p = self.input.len() / d;
        let g = g_out.data();
        let x = self.input.data();
        let wd = self.weight.data();

        let mut d_input = Tensor::zeros(self.input.shape().to_vec());
        d_input
            .data_mut()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(row, dpx)| {
                let grow = &g[row * o..(row + 1) * o];
                for (di, dv) in dpx.iter_mut().enumerate() {
                    let wrow = &wd[di * o..(di + 1) * o];
                    let mut acc = F::ZERO;
                    for (gv, wv) in grow.iter().zip(wrow) {
                        acc += *gv * *wv;
                    }
                    *dv = acc;
                }
            });

        let mut d_weight = Tensor::zeros(vec![d, o]);
        {
            let dw = d_weight.data_mut();
            for row in 0..p {
                let xrow = &x[row * d..(row + 1) * d];
                let grow = &g[row * o..(row + 1) * o];
                for (di, &xv) in xrow.iter().enumerate() {
                    let dwrow = &mut dw[di * o..(di + 1) * o];
                    for (dv, gv) in dwrow.iter_mut().zip(grow) {
                        *dv += xv * *gv;
                    }
                }
            }
        }
        let mut d_bias = Tensor::zeros(vec![o]);
        {
            let db = d_bias.data_mut();
            for grow in g.chunks_exact(o) {
                for (dv, gv) in db.iter_mut().zip(grow) {
                    *dv += *gv;
                }
            }
        }
        Ok((d_input, d_weight, d_bias))
    }
}

// ---------------------------------------------------------------------------
// cross entropy with ignored labels
// ---------------------------------------------------------------------------

pub struct CrossEntropyCtx<F> {
    /// Softmax per pixel; zeros for ignored pixels.
    probs: Tensor<F>,
    labels: Vec<i32>,
    kept: usize,
}

/// Mean softmax cross entropy over pixels whose label is not in
/// `ignore`; gradient is exactly zero at ignored pixels.
pub fn cross_entropy_ignore<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[i32],
    ignore: &[i32],
) -> Result<(F, CrossEntropyCtx<F>)> {
    let (p, k) = match logits.shape() {
        [p, k] => (*p, *k),
        s => {
            return Err(shape_err(
                "cross_entropy",
                format!("logits must be [P, K], got {s:?}"),
            ))
        }
    };
    if labels.len() != p {
        return Err(shape_err(
            "cross_entropy",
            format!("{} labels for {p} pixels", labels.len()),
        ));
    }
    let z = logits.data();
    let mut probs = Tensor::zeros(vec![p, k]);
    let pd = probs.data_mut();
    let mut loss = F::ZERO;
    let mut kept = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if ignore.contains(&y) {
            continue;
        }
        if y < 0 || y as usize >= k {
            return Err(shape_err(
                "cross_entropy",
                format!("label {y} out of range for K={k}"),
            ));
        }
        let row = &z[i * k..(i + 1) * k];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let mut denom = F::ZERO;
        for &v in row.iter() {
            denom += (v - m).exp();
        }
        let lse = m + denom.ln();
        loss += lse - row[y as usize];
        let prow = &mut pd[i * k..(i + 1) * k];
        for (pv, &v) in prow.iter_mut().zip(row) {
            *pv = (v - lse).exp();
        }
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::EmptyBatch);
    }
    loss *= F::ONE / F::from_f64(kept as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok((
        loss,
        CrossEntropyCtx {
            probs,
            labels: labels.to_vec(),
            kept,
        },
    ))
}

impl<F: Scalar> CrossEntropyCtx<F> {
    /// d(loss)/d(logits), scaled by `g` (normally 1).
    pub fn backward(&self, g: F) -> Result<Tensor<F>> {
        let k = self.probs.shape()[1];
        let scale = g / F::from_f64(self.kept as f64);
        let mut d = self.probs.clone();
        let dd = d.data_mut();
        for (i, &y) in self.labels.iter().enumerate() {
            let row = &mut dd[i * k..(i + 1) * k];
            let is_kept = row.iter().any(|&v| v != F::ZERO);
            if !is_kept {
                continue;
            }
            row[y as usize] -= F::ONE;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Ok(d)
    }
}

/// Softmax of one logit row (used by rank maps and the random baseline).
pub fn softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.maximum(v);
    }
    let mut out: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
    let mut s = F::ZERO;
    for &v in &out {
        s += v;
    }
    for v in &mut out {
        *v = *v / s;
    }
    out
}

#[inline]
fn dims3<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(shape_err(op, format!("expected rank-3 [H,W,C], got {s:?}"))),
    }
}

fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(shape_err(
            "avg_pool2d",
            format!("window {k} larger than padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "ops-test");
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let x = randn(vec![5, 4, 3], 1);
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(vec![3]);
        let (y, _) = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        // Independent brute-force oracle with explicit padding arithmetic.
        let x = randn(vec![5, 5, 1], 2);
        let k = randn(vec![3, 3, 1, 1], 3);
        let b = randn(vec![1], 4);
        let (y, _) = conv2d(&x, &k, &b, 1).unwrap();
        for or in 0..5usize {
            for oc in 0..5usize {
                let mut acc = b.data()[0];
                for u in 0..3usize {
                    for v in 0..3usize {
                        let ir = or as isize + u as isize - 1;
                        let ic = oc as isize + v as isize - 1;
                        if ir < 0 || ir >= 5 || ic < 0 || ic >= 5 {
                            continue;
                        }
                        acc += x.get3(ir as usize, ic as usize, 0) * k.data()[(u * 3 + v)];
                    }
                }
                assert!((y.get3(or, oc, 0) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_fusion_resolution_shape() {
        // Fusion-resolution arithmetic: 32x32x179 -> 32x32x256 with a 3x3.
        let x = Tensor::<f32>::zeros(vec![32, 32, 179]);
        let k = Tensor::<f32>::zeros(vec![3, 3, 179, 256]);
        let b = Tensor::<f32>::zeros(vec![256]);
        let (y, _) = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[32, 32, 256]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![4, 4, 2]);
        let k = Tensor::<f32>::zeros(vec![3, 3, 3, 1]);
        let b = Tensor::<f32>::zeros(vec![1]);
        assert!(conv2d(&x, &k, &b, 1).is_err());
    }

    #[test]
    fn conv2d_stride_uses_ceil_dims() {
        let x = Tensor::<f32>::zeros(vec![5, 7, 1]);
        let k = Tensor::<f32>::zeros(vec![3, 3, 1, 2]);
        let b = Tensor::<f32>::zeros(vec![2]);
        let (y, _) = conv2d(&x, &k, &b, 2).unwrap();
        assert_eq!(y.shape(), &[3, 4, 2]);
    }

    #[test]
    fn conv_transpose_doubles_and_chains_to_full_resolution() {
        let x = randn(vec![32, 32, 4], 5);
        let k1 = randn(vec![3, 3, 4, 4], 6);
        let b = Tensor::zeros(vec![4]);
        let (y, _) = conv_transpose2d(&x, &k1, &b).unwrap();
        assert_eq!(y.shape(), &[64, 64, 4]);
        // Three chained stride-2 stages with output dims 32, 16, 2
        // map the 1/8-resolution grid back to full resolution.
        let x = Tensor::<f32>::zeros(vec![32, 32, 8]);
        let (y, _) = conv_transpose2d(
            &x,
            &Tensor::zeros(vec![3, 3, 8, 32]),
            &Tensor::zeros(vec![32]),
        )
        .unwrap();
        let (y, _) = conv_transpose2d(
            &y,
            &Tensor::zeros(vec![3, 3, 32, 16]),
            &Tensor::zeros(vec![16]),
        )
        .unwrap();
        let (y, _) = conv_transpose2d(
            &y,
            &Tensor::zeros(vec![3, 3, 16, 2]),
            &Tensor::zeros(vec![2]),
        )
        .unwrap();
        assert_eq!(y.shape(), &[256, 256, 2]);
    }

    #[test]
    fn conv_transpose_equals_conv_gradient_oracle() {
        // Forward transpose on a 4x4 equals the input-gradient of the
        // matching stride-2 conv evaluated on an 8x8.
        let x4 = randn(vec![4, 4, 2], 7);
        let k = randn(vec![3, 3, 2, 3], 8);
        let zero_b = Tensor::zeros(vec![3]);
        let (fwd, _) = conv_transpose2d(&x4, &k, &zero_b).unwrap();

        let dummy8 = Tensor::<f64>::zeros(vec![8, 8, 3]);
        // conv maps [8,8,3] -> [4,4,2] with kernel [3,3,3,2]: swap in/out axes.
        let mut k_swap = Tensor::zeros(vec![3, 3, 3, 2]);
        for u in 0..3 {
            for v in 0..3 {
                for ci in 0..2 {
                    for co in 0..3 {
                        k_swap.data_mut()[((u * 3 + v) * 3 + co) * 2 + ci] =
                            k.data()[((u * 3 + v) * 2 + ci) * 3 + co];
                    }
                }
            }
        }
        let (_, ctx) = conv2d(&dummy8, &k_swap, &Tensor::zeros(vec![2]), 2).unwrap();
        let (g_in, _, _) = ctx.backward(&x4).unwrap();
        for (a, b) in fwd.data().iter().zip(g_in.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_preserves_constants_without_padding() {
        let x = Tensor::<f64>::full(vec![8, 8, 3], 2.5);
        let (y, _) = avg_pool2d(&x, 2, 2, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn avg_pool_fusion_geometry() {
        let x = Tensor::<f32>::zeros(vec![256, 256, 51]);
        let (y, _) = avg_pool2d(&x, 6, 8, 1).unwrap();
        assert_eq!(y.shape(), &[32, 32, 51]);
    }

    #[test]
    fn avg_pool_matches_block_average() {
        let x = randn(vec![4, 4, 1], 10);
        let (y, _) = avg_pool2d(&x, 2, 2, 0).unwrap();
        for or in 0..2 {
            for oc in 0..2 {
                let mean = (x.get3(or * 2, oc * 2, 0)
                    + x.get3(or * 2, oc * 2 + 1, 0)
                    + x.get3(or * 2 + 1, oc * 2, 0)
                    + x.get3(or * 2 + 1, oc * 2 + 1, 0))
                    / 4.0;
                assert!((y.get3(or, oc, 0) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn avg_pool_rejects_empty_output() {
        let x = Tensor::<f32>::zeros(vec![2, 2, 1]);
        assert!(avg_pool2d(&x, 8, 8, 0).is_err());
    }

    #[test]
    fn max_pool_constant_routes_gradient_to_first_slot() {
        let x = Tensor::<f64>::full(vec![4, 4, 1], 1.0);
        let (y, ctx) = max_pool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
        let g = Tensor::full(vec![2, 2, 1], 1.0);
        let d = ctx.backward(&g).unwrap();
        for or in 0..2 {
            for oc in 0..2 {
                assert_eq!(d.get3(or * 2, oc * 2, 0), 1.0);
                assert_eq!(d.get3(or * 2, oc * 2 + 1, 0), 0.0);
            }
        }
    }

    #[test]
    fn max_pool_matches_block_max_and_five_stages_shrink_256_to_8() {
        let x = randn(vec![4, 4, 2], 11);
        let (y, _) = max_pool2d(&x).unwrap();
        for or in 0..2 {
            for oc in 0..2 {
                for ch in 0..2 {
                    let m = x
                        .get3(or * 2, oc * 2, ch)
                        .max(x.get3(or * 2, oc * 2 + 1, ch))
                        .max(x.get3(or * 2 + 1, oc * 2, ch))
                        .max(x.get3(or * 2 + 1, oc * 2 + 1, ch));
                    assert_eq!(y.get3(or, oc, ch), m);
                }
            }
        }
        let mut t = Tensor::<f32>::zeros(vec![256, 256, 1]);
        for _ in 0..5 {
            t = max_pool2d(&t).unwrap().0;
        }
        assert_eq!(t.shape(), &[8, 8, 1]);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let x = Tensor::<f32>::zeros(vec![3, 4, 1]);
        assert!(max_pool2d(&x).is_err());
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = randn(vec![5, 7, 2], 12);
        let (y, _) = bilinear_resize(&x, 5, 7).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bilinear_upsample_stays_in_range_and_monotone() {
        let x = Tensor::new(vec![2, 2, 1], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let (y, _) = bilinear_resize(&x, 4, 4).unwrap();
        for &v in y.data() {
            assert!((0.0..=3.0).contains(&v));
        }
        for r in 0..4 {
            for c in 0..3 {
                assert!(y.get3(r, c, 0) <= y.get3(r, c + 1, 0) + 1e-12);
            }
        }
        for c in 0..4 {
            for r in 0..3 {
                assert!(y.get3(r, c, 0) <= y.get3(r + 1, c, 0) + 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_2x2_to_3x3_matches_half_pixel_formula() {
        let x = Tensor::new(vec![2, 2, 1], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let (y, _) = bilinear_resize(&x, 3, 3).unwrap();
        // src = (i + 0.5) * 2/3 - 0.5 for i in 0..3 -> {-1/6 -> 0 (clamp), 0.5, 7/6 -> 1 (clamp)}
        let expect = [
            [0.0, 0.5, 1.0],
            [1.0, 1.5, 2.0],
            [2.0, 2.5, 3.0],
        ];
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (y.get3(r, c, 0) - expect[r][c]).abs() < 1e-12,
                    "({r},{c}) got {} want {}",
                    y.get3(r, c, 0),
                    expect[r][c]
                );
            }
        }
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(vec![3], vec![0.0f64, -1.0, 3.0]).unwrap();
        let (y, _) = leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.data(), &[0.0, -0.2, 3.0]);
        let x = Tensor::new(vec![2], vec![-2.0f64, 3.0]).unwrap();
        let (y, _) = leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.data(), &[-0.4, 3.0]);
    }

    #[test]
    fn softplus_values_and_stability() {
        let (y, _) = softplus(&Tensor::scalar(0.0f64)).unwrap();
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let (y, _) = softplus(&Tensor::scalar(50.0f64)).unwrap();
        assert!((y.data()[0] - 50.0).abs() < 1e-9);
        let (y, _) = softplus(&Tensor::scalar(-50.0f64)).unwrap();
        let expect = (-50.0f64).exp();
        assert!(((y.data()[0] - expect) / expect).abs() < 1e-6);
    }

    #[test]
    fn softplus_positive_and_monotone() {
        let mut rng = stream(13, "softplus");
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let x = -20.0 + i as f64 * 0.2 + rng.gen::<f64>() * 0.01;
            let y = softplus_scalar(x);
            assert!(y > 0.0);
            assert!(y >= prev);
            prev = y;
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let x = randn(vec![16, 16, 3], 14);
        let gamma = Tensor::full(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        let mut state = bn_state_init(3);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut state, BnMode::Train, BN_DECAY).unwrap();
        let n = 16 * 16;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for r in 0..16 {
                for c in 0..16 {
                    mean += y.get3(r, c, ch);
                }
            }
            mean /= n as f64;
            for r in 0..16 {
                for c in 0..16 {
                    var += (y.get3(r, c, ch) - mean).powi(2);
                }
            }
            var /= n as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batch_norm_running_update_uses_decay() {
        let x = Tensor::new(vec![3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let gamma = Tensor::full(vec![1], 1.0);
        let beta = Tensor::zeros(vec![1]);
        let mut state = bn_state_init(1);
        batch_norm(&x, &gamma, &beta, &mut state, BnMode::Train, 0.99).unwrap();
        // new_mean = 0.99 * 0 + 0.01 * 2.0
        assert!((state.data()[0] - 0.02).abs() < 1e-12);
        let batch_var = ((1.0f64 - 2.0).powi(2) + 0.0 + (3.0f64 - 2.0).powi(2)) / 3.0;
        assert!((state.data()[1] - (0.99 + 0.01 * batch_var)).abs() < 1e-12);
        assert_eq!(state.data()[2], 1.0);
    }

    #[test]
    fn batch_norm_single_channel_example() {
        let x = Tensor::new(vec![3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let gamma = Tensor::full(vec![1], 1.0);
        let beta = Tensor::zeros(vec![1]);
        let mut state = bn_state_init(1);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut state, BnMode::Train, 0.99).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (got, want) in y.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn linear_identity_and_hand_multiply() {
        let x = Tensor::new(vec![2], vec![3.0f64, -1.0]).unwrap();
        let mut w = Tensor::zeros(vec![2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let b = Tensor::zeros(vec![2]);
        let (y, _) = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());

        let w = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5f64, -0.5]).unwrap();
        let (y, _) = linear(&x, &w, &b).unwrap();
        // [3, -1] . W + b
        assert_eq!(y.data(), &[3.0 * 1.0 - 1.0 * 3.0 + 0.5, 3.0 * 2.0 - 1.0 * 4.0 - 0.5]);
    }

    #[test]
    fn linear_hypercolumn_shape() {
        let x = Tensor::<f32>::zeros(vec![4, 1043]);
        let w = Tensor::<f32>::zeros(vec![1043, 512]);
        let b = Tensor::<f32>::zeros(vec![512]);
        let (y, _) = linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[4, 512]);
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln_k() {
        for k in [2usize, 5, 13] {
            let logits = Tensor::<f64>::zeros(vec![3, k]);
            let labels = vec![0, 1, 0];
            let (loss, _) = cross_entropy_ignore(&logits, &labels, &[]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut logits = Tensor::<f64>::zeros(vec![1, 4]);
        logits.data_mut()[2] = 60.0;
        let (loss, _) = cross_entropy_ignore(&logits, &[2], &[]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Tensor::new(vec![2, 2], vec![0.3f64, -0.7, 1.2, 0.1]).unwrap();
        let labels = [1, 0];
        let (loss, ctx) = cross_entropy_ignore(&logits, &labels, &[]).unwrap();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let a = logits.data()[i * 2];
            let b = logits.data()[i * 2 + 1];
            let lse = a.max(b) + ((a - a.max(b)).exp() + (b - a.max(b)).exp()).ln();
            expect += lse - logits.data()[i * 2 + y as usize];
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-12);
        let g = ctx.backward(1.0).unwrap();
        // Gradient rows sum to zero.
        assert!((g.data()[0] + g.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let logits = Tensor::new(vec![1, 3], vec![0.2f64, -1.0, 0.5]).unwrap();
        let shifted = logits.map(|v| v + 123.0);
        let (a, _) = cross_entropy_ignore(&logits, &[2], &[]).unwrap();
        let (b, _) = cross_entropy_ignore(&shifted, &[2], &[]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let logits = Tensor::<f64>::zeros(vec![2, 3]);
        let err = cross_entropy_ignore(&logits, &[7, 7], &[7]).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
    }

    #[test]
    fn cross_entropy_ignored_pixels_get_zero_gradient() {
        let logits = randn(vec![3, 4], 15);
        let labels = [1, 9, 2];
        let (_, ctx) = cross_entropy_ignore(&logits, &labels, &[9]).unwrap();
        let g = ctx.backward(1.0).unwrap();
        for k in 0..4 {
            assert_eq!(g.data()[4 + k], 0.0);
        }
    }
}
