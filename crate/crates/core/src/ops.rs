//! Forward and backward kernels for the layer types used by the toolkit.
//!
//! Every reduction accumulates in `f64` and rounds once on store. Kernels
//! parallelise over independent output slices only, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(dim_err("conv2d", format!("input must be NCHW, got {x:?}")));
        }
        if w.len() != 4 {
            return Err(dim_err("conv2d", format!("kernel must be OIKK, got {w:?}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if x[1] != w[1] {
            return Err(dim_err(
                "conv2d",
                format!("input channels (axis 1 of x) = {} but kernel expects {} (axis 1 of w)", x[1], w[1]),
            ));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        valid_range(self.w, self.ow, self.stride, self.pad, kx)
    }

    fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        valid_range(self.h, self.oh, self.stride, self.pad, ky)
    }
}

fn valid_range(len: usize, out: usize, stride: usize, pad: usize, k: usize) -> std::ops::Range<usize> {
    // need 0 <= o*stride + k - pad < len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out)
    };
    lo..hi.max(lo)
}

/// 2-D convolution (cross-correlation) of `x` (NCHW) with `w` (OIKK) plus bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Result<Tensor> {
    let g = Conv2dGeom::new(x.shape(), w.shape(), stride, pad)?;
    if b.len() != g.o {
        return Err(dim_err(
            "conv2d",
            format!("bias length {} but kernel has {} output channels (axis 0)", b.len(), g.o),
        ));
    }
    let xs = x.data();
    let ws = w.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.o * out_plane];
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, o) = (idx / g.o, idx % g.o);
            let mut acc = vec![b[o] as f64; out_plane];
            for c in 0..g.c {
                let xp = &xs[(n * g.c + c) * in_plane..][..in_plane];
                let wp = &ws[(o * g.c + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    let rows = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let wv = wp[ky * g.kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = g.valid_cols(kx);
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xp[iy * g.w..][..g.w];
                            let arow = &mut acc[oy * g.ow..][..g.ow];
                            for ox in cols.clone() {
                                arow[ox] += wv * xrow[ox * g.stride + kx - g.pad] as f64;
                            }
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
        });
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads> {
    let g = Conv2dGeom::new(x.shape(), w.shape(), stride, pad)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(dim_err(
            "conv2d_backward",
            format!("gradient shape {:?} != output shape {:?}", grad_out.shape(), [g.n, g.o, g.oh, g.ow]),
        ));
    }
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksz = g.kh * g.kw;

    // input gradient: one sample per task
    let mut gx = vec![0.0f32; g.n * g.c * in_plane];
    gx.par_chunks_mut(g.c * in_plane)
        .enumerate()
        .for_each(|(n, dst)| {
            let mut acc = vec![0.0f64; g.c * in_plane];
            for o in 0..g.o {
                let gp = &gs[(n * g.o + o) * out_plane..][..out_plane];
                for c in 0..g.c {
                    let wp = &ws[(o * g.c + c) * ksz..][..ksz];
                    let ap = &mut acc[c * in_plane..][..in_plane];
                    for ky in 0..g.kh {
                        let rows = g.valid_rows(ky);
                        for kx in 0..g.kw {
                            let wv = wp[ky * g.kw + kx] as f64;
                            let cols = g.valid_cols(kx);
                            for oy in rows.clone() {
                                let iy = oy * g.stride + ky - g.pad;
                                for ox in cols.clone() {
                                    ap[iy * g.w + ox * g.stride + kx - g.pad] +=
                                        wv * gp[oy * g.ow + ox] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
        });

    // weight gradient: one output channel per task, samples summed in order
    let mut gw = vec![0.0f32; g.o * g.c * ksz];
    let mut gb = vec![0.0f32; g.o];
    gw.par_chunks_mut(g.c * ksz)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(o, (dst, bdst))| {
            let mut acc = vec![0.0f64; g.c * ksz];
            let mut bacc = 0.0f64;
            for n in 0..g.n {
                let gp = &gs[(n * g.o + o) * out_plane..][..out_plane];
                bacc += gp.iter().map(|&v| v as f64).sum::<f64>();
                for c in 0..g.c {
                    let xp = &xs[(n * g.c + c) * in_plane..][..in_plane];
                    for ky in 0..g.kh {
                        let rows = g.valid_rows(ky);
                        for kx in 0..g.kw {
                            let cols = g.valid_cols(kx);
                            let mut s = 0.0f64;
                            for oy in rows.clone() {
                                let iy = oy * g.stride + ky - g.pad;
                                let xrow = &xp[iy * g.w..][..g.w];
                                let grow = &gp[oy * g.ow..][..g.ow];
                                for ox in cols.clone() {
                                    s += xrow[ox * g.stride + kx - g.pad] as f64 * grow[ox] as f64;
                                }
                            }
                            acc[c * ksz + ky * g.kw + kx] += s;
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
            *bdst = bacc as f32;
        });

    Ok(Conv2dGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        weight: gw,
        bias: gb,
    })
}

fn check_linear(x: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(dim_err(
            op,
            format!("expected 2-D input and weight, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (m, dw) = (w.shape()[0], w.shape()[1]);
    if d != dw {
        return Err(dim_err(
            op,
            format!("input features (axis 1 of x) = {d} but weight expects {dw} (axis 1 of W)"),
        ));
    }
    Ok((n, d, m))
}

/// `y = x Wᵀ + b` for `x: N×D`, `W: M×D`.
pub fn linear(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    let (n, d, m) = check_linear(x, w, "linear")?;
    if b.len() != m {
        return Err(dim_err("linear", format!("bias length {} but weight has {m} rows", b.len())));
    }
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0f32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let xr = &xs[i * d..][..d];
        for (j, y) in row.iter_mut().enumerate() {
            let wr = &ws[j * d..][..d];
            let s: f64 = xr.iter().zip(wr).map(|(&a, &b)| a as f64 * b as f64).sum();
            *y = (s + b[j] as f64) as f32;
        }
    });
    Tensor::new(vec![n, m], out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, d, m) = check_linear(x, w, "linear_backward")?;
    if grad_out.shape() != [n, m] {
        return Err(dim_err(
            "linear_backward",
            format!("gradient shape {:?} != output shape {:?}", grad_out.shape(), [n, m]),
        ));
    }
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();
    let mut gx = vec![0.0f32; n * d];
    gx.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let gr = &gs[i * m..][..m];
        for (k, v) in row.iter_mut().enumerate() {
            let s: f64 = (0..m).map(|j| gr[j] as f64 * ws[j * d + k] as f64).sum();
            *v = s as f32;
        }
    });
    let mut gw = vec![0.0f32; m * d];
    let mut gb = vec![0.0f32; m];
    gw.par_chunks_mut(d)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(j, (row, bj))| {
            let mut acc = vec![0.0f64; d];
            let mut bacc = 0.0f64;
            for i in 0..n {
                let gv = gs[i * m + j] as f64;
                bacc += gv;
                for (a, &xv) in acc.iter_mut().zip(&xs[i * d..][..d]) {
                    *a += gv * xv as f64;
                }
            }
            for (r, a) in row.iter_mut().zip(acc) {
                *r = a as f32;
            }
            *bj = bacc as f32;
        });
    Ok(LinearGrads {
        input: Tensor::new(vec![n, d], gx)?,
        weight: gw,
        bias: gb,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn pool_dims(x: &Tensor, k: usize, stride: usize, op: &'static str) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(dim_err(op, format!("input must be NCHW, got {:?}", x.shape())));
    }
    if k == 0 || stride == 0 {
        return Err(Error::Parameter(format!("{op}: kernel and stride must be >= 1")));
    }
    let s = x.shape();
    if s[2] < k || s[3] < k {
        return Err(dim_err(op, format!("window {k} larger than input {}x{}", s[2], s[3])));
    }
    let oh = (s[2] - k) / stride + 1;
    let ow = (s[3] - k) / stride + 1;
    Ok((s[0], s[1], s[2], s[3], oh, ow))
}

/// Window max with floor semantics; also returns the flat input index of each maximum.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_dims(x, k, stride, "maxpool2d")?;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut bi = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xs[i] > best {
                            best = xs[i];
                            bi = i;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    gx
}

pub fn avgpool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = pool_dims(x, k, stride, "avgpool2d")?;
    let xs = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f64;
                for ky in 0..k {
                    for kx in 0..k {
                        s += xs[base + (oy * stride + ky) * w + ox * stride + kx] as f64;
                    }
                }
                out.push((s * inv) as f32);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool2d_backward(input_shape: &[usize], k: usize, stride: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let inv = 1.0 / (k * k) as f64;
    let mut acc = vec![0.0f64; planes * h * w];
    let gs = grad_out.data();
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gs[(p * oh + oy) * ow + ox] as f64 * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        acc[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
        .expect("shape preserved")
}

/// Per-channel affine statistics of a batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub mean: &'a [f32],
    pub var: &'a [f32],
    pub eps: f32,
}

fn channel_view(x: &Tensor, op: &'static str, channels: usize) -> Result<(usize, usize)> {
    if x.ndim() < 2 || x.shape()[1] != channels {
        return Err(dim_err(
            op,
            format!("input {:?} does not have {channels} channels on axis 1", x.shape()),
        ));
    }
    Ok((x.shape()[0], x.shape()[2..].iter().product()))
}

/// Inference-mode batch norm using stored statistics.
pub fn batchnorm_eval(x: &Tensor, p: BnParams<'_>) -> Result<Tensor> {
    let c = p.gamma.len();
    let (n, sp) = channel_view(x, "batchnorm", c)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (p.var[ch] as f64 + p.eps as f64).sqrt();
        let (g, b, m) = (p.gamma[ch] as f64, p.beta[ch] as f64, p.mean[ch] as f64);
        for i in 0..n {
            for v in &mut d[(i * c + ch) * sp..][..sp] {
                *v = ((*v as f64 - m) * inv * g + b) as f32;
            }
        }
    }
    Ok(out)
}

/// Training-mode batch norm: normalises with batch statistics.
pub struct BnTrainOutput {
    pub output: Tensor,
    pub x_hat: Tensor,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub fn batchnorm_train(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<BnTrainOutput> {
    let c = gamma.len();
    let (n, sp) = channel_view(x, "batchnorm", c)?;
    let xs = x.data();
    let cnt = (n * sp) as f64;
    let mut out = vec![0.0f32; xs.len()];
    let mut xh = vec![0.0f32; xs.len()];
    let mut means = vec![0.0f32; c];
    let mut vars = vec![0.0f32; c];
    let mut invs = vec![0.0f32; c];
    for ch in 0..c {
        let idx = |i: usize| (i * c + ch) * sp;
        let mean = (0..n).map(|i| xs[idx(i)..][..sp].iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / cnt;
        let var = (0..n)
            .map(|i| xs[idx(i)..][..sp].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / cnt;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for i in 0..n {
            for k in 0..sp {
                let h = (xs[idx(i) + k] as f64 - mean) * inv;
                xh[idx(i) + k] = h as f32;
                out[idx(i) + k] = (h * gamma[ch] as f64 + beta[ch] as f64) as f32;
            }
        }
        means[ch] = mean as f32;
        vars[ch] = var as f32;
        invs[ch] = inv as f32;
    }
    Ok(BnTrainOutput {
        output: Tensor::new(x.shape().to_vec(), out)?,
        x_hat: Tensor::new(x.shape().to_vec(), xh)?,
        batch_mean: means,
        batch_var: vars,
        inv_std: invs,
    })
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Backward of [`batchnorm_train`].
pub fn batchnorm_train_backward(x_hat: &Tensor, gamma: &[f32], inv_std: &[f32], grad_out: &Tensor) -> Result<BnGrads> {
    let c = gamma.len();
    let (n, sp) = channel_view(x_hat, "batchnorm_backward", c)?;
    let xh = x_hat.data();
    let gs = grad_out.data();
    let cnt = (n * sp) as f64;
    let mut gx = vec![0.0f32; xh.len()];
    let mut gg = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let idx = |i: usize| (i * c + ch) * sp;
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in 0..n {
            for k in 0..sp {
                let g = gs[idx(i) + k] as f64;
                sum_g += g;
                sum_gx += g * xh[idx(i) + k] as f64;
            }
        }
        gg[ch] = sum_gx as f32;
        gbeta[ch] = sum_g as f32;
        let scale = gamma[ch] as f64 * inv_std[ch] as f64 / cnt;
        for i in 0..n {
            for k in 0..sp {
                let j = idx(i) + k;
                gx[j] = (scale * (cnt * gs[j] as f64 - sum_g - xh[j] as f64 * sum_gx)) as f32;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(x_hat.shape().to_vec(), gx)?,
        gamma: gg,
        beta: gbeta,
    })
}

pub fn batchnorm_eval_backward(p: BnParams<'_>, x: &Tensor, grad_out: &Tensor) -> Result<BnGrads> {
    let c = p.gamma.len();
    let (n, sp) = channel_view(x, "batchnorm_backward", c)?;
    let xs = x.data();
    let gs = grad_out.data();
    let mut gx = vec![0.0f32; xs.len()];
    let mut gg = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let inv = 1.0 / (p.var[ch] as f64 + p.eps as f64).sqrt();
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for i in 0..n {
            for k in 0..sp {
                let j = (i * c + ch) * sp + k;
                let g = gs[j] as f64;
                sg += g;
                sgx += g * (xs[j] as f64 - p.mean[ch] as f64) * inv;
                gx[j] = (g * p.gamma[ch] as f64 * inv) as f32;
            }
        }
        gg[ch] = sgx as f32;
        gbeta[ch] = sg as f32;
    }
    Ok(BnGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        gamma: gg,
        beta: gbeta,
    })
}

pub struct CrossEntropy {
    /// Mean negative log-likelihood over the batch.
    pub loss: f32,
    /// Gradient of the mean loss w.r.t. the logits.
    pub grad: Tensor,
}

/// Mean softmax cross-entropy with max-subtracted log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    if logits.ndim() != 2 {
        return Err(dim_err("softmax_cross_entropy", format!("logits must be N×K, got {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(Error::Parameter("softmax_cross_entropy needs at least 2 classes".into()));
    }
    if labels.len() != n {
        return Err(dim_err("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let ls = logits.data();
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; n * k];
    for i in 0..n {
        let row = &ls[i * k..][..k];
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[labels[i]] as f64;
        for j in 0..k {
            let p = (row[j] as f64 - lse).exp();
            let t = if j == labels[i] { 1.0 } else { 0.0 };
            grad[i * k + j] = ((p - t) / n as f64) as f32;
        }
    }
    Ok(CrossEntropy {
        loss: (total / n as f64) as f32,
        grad: Tensor::new(vec![n, k], grad)?,
    })
}

/// `p ← p − lr·g`, elementwise.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(dim_err(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let y = conv2d(&t(&[1, 1, 1, 1], &[1.0]), &t(&[1, 1, 1, 1], &[1.0]), &[0.0], 1, 0).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn conv_ones_sum_and_padding() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[1., 2., 1., 2., 4., 2., 1., 2., 1.]);
    }

    #[test]
    fn conv_stride_output_dims() {
        let x = Tensor::full(&[2, 3, 7, 6], 0.5);
        let w = Tensor::full(&[4, 3, 3, 3], 0.1);
        let y = conv2d(&x, &w, &[0.0; 4], 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let err = conv2d(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 3, 1, 1]), &[0.0], 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 1"), "{msg}");
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = linear(&x, &t(&[2, 2], &[1., 1., 0., 1.]), &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        let y = linear(&x, &t(&[2, 2], &[1., 0., 0., 1.]), &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), x.data());
        let y = linear(&Tensor::zeros(&[1, 2]), &t(&[2, 2], &[1., 1., 0., 1.]), &[0.5, -1.0]).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_grad_is_outer_product() {
        // single sample, loss = ½‖y − target‖² → dW = (y − t) xᵀ
        let x = t(&[1, 3], &[1.0, -2.0, 0.5]);
        let w = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let y = linear(&x, &w, &[0.0, 0.0]).unwrap();
        let target = [1.0f32, -1.0];
        let r: Vec<f32> = y.data().iter().zip(target).map(|(a, b)| a - b).collect();
        let g = linear_backward(&x, &w, &t(&[1, 2], &r)).unwrap();
        for j in 0..2 {
            for k in 0..3 {
                assert_abs_diff_eq!(g.weight[j * 3 + k], r[j] * x.data()[k], epsilon = 1e-6);
            }
        }
        assert_eq!(g.bias, r);
    }

    #[test]
    fn relu_and_pools() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().0.data(), &[4.0]);
        assert_eq!(avgpool2d(&x, 2, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let g = relu_backward(&x, &Tensor::from_vec(vec![5.0, 5.0]));
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let ce = softmax_cross_entropy(&Tensor::zeros(&[1, 10]), &[3]).unwrap();
        assert_abs_diff_eq!(ce.loss as f64, 10f64.ln(), epsilon = 1e-6);
        let ce = softmax_cross_entropy(&t(&[1, 2], &[10.0, 0.0]), &[0]).unwrap();
        assert_abs_diff_eq!(ce.loss as f64, (1.0 + (-10f64).exp()).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(ce.loss as f64, 4.54e-5, epsilon = 1e-7);
        let ce = softmax_cross_entropy(&t(&[1, 2], &[0.0, 10.0]), &[0]).unwrap();
        assert_abs_diff_eq!(ce.loss as f64, 10.0000454, epsilon = 1e-5);
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 1.0]), &[2]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0f32];
        sgd_step(&mut p, &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.9);
        sgd_step(&mut p, &[0.0], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.9);
        let mut p = [1.0f32, 2.0];
        sgd_step(&mut p, &[2.0, -2.0], 0.5).unwrap();
        assert_eq!(p, [0.0, 3.0]);
        assert!(sgd_step(&mut p, &[1.0], 0.5).is_err());
        assert!(sgd_step(&mut p, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn valid_range_matches_bounds_check() {
        for len in 1..7 {
            for pad in 0..3 {
                for k in 0..4 {
                    for stride in 1..4 {
                        if len + 2 * pad < k + 1 {
                            continue;
                        }
                        let out = (len + 2 * pad - (k + 1)) / stride + 1;
                        for kk in 0..=k {
                            let r = valid_range(len, out, stride, pad, kk);
                            for o in 0..out {
                                let i = (o * stride + kk) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < len;
                                assert_eq!(r.contains(&o), inside, "len {len} pad {pad} k {kk} s {stride} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
