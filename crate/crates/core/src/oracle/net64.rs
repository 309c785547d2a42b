//! Double-precision reference evaluator, written independently of the f32 ops.

use crate::error::{Error, Result};
use crate::model::Layer;
use crate::quant::{code_max, code_min};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn from_f32(t: &Tensor) -> Self {
        Self::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let r = self.data.len() / self.batch();
        &self.data[n * r..(n + 1) * r]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum L64 {
    Linear { w: Vec<f64>, b: Vec<f64>, out: usize, inp: usize },
    Conv { w: Vec<f64>, b: Vec<f64>, o: usize, c: usize, k: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, s: usize },
    AvgPool { k: usize, s: usize },
    Flatten,
    /// Per-channel affine `x·scale + shift` (eval-mode batch-norm).
    BnEval { scale: Vec<f64>, shift: Vec<f64> },
    /// Batch-statistics batch-norm with biased variance.
    BnTrain { gamma: Vec<f64>, beta: Vec<f64>, eps: f64 },
    FakeQuant { scale: f64, lo: f64, hi: f64 },
}

impl L64 {
    pub fn is_affine(&self) -> bool {
        matches!(self, L64::Linear { .. } | L64::Conv { .. })
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            L64::Linear { w, .. } | L64::Conv { w, .. } => Some(w),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            L64::Linear { w, .. } | L64::Conv { w, .. } => Some(w),
            _ => None,
        }
    }
}

/// Converts f32 layers; batch-norm uses stored statistics unless `train_bn`.
pub fn convert(layers: &[Layer], train_bn: bool) -> Result<Vec<L64>> {
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Linear(l) => L64::Linear {
                    w: f(l.weight.data()),
                    b: f(&l.bias),
                    out: l.weight.shape()[0],
                    inp: l.weight.shape()[1],
                },
                Layer::Conv2d(c) => {
                    let s = c.weight.shape();
                    if s[2] != s[3] {
                        return Err(Error::Parameter("reference evaluator supports square kernels only".into()));
                    }
                    L64::Conv {
                        w: f(c.weight.data()),
                        b: f(&c.bias),
                        o: s[0],
                        c: s[1],
                        k: s[2],
                        stride: c.stride,
                        pad: c.pad,
                    }
                }
                Layer::Relu => L64::Relu,
                Layer::MaxPool { kernel, stride } => L64::MaxPool { k: *kernel, s: *stride },
                Layer::AvgPool { kernel, stride } => L64::AvgPool { k: *kernel, s: *stride },
                Layer::Flatten => L64::Flatten,
                Layer::BatchNorm(bn) if train_bn => L64::BnTrain {
                    gamma: f(&bn.gamma),
                    beta: f(&bn.beta),
                    eps: bn.eps as f64,
                },
                Layer::BatchNorm(bn) => {
                    let scale: Vec<f64> = (0..bn.gamma.len())
                        .map(|c| bn.gamma[c] as f64 / (bn.var[c] as f64 + bn.eps as f64).sqrt())
                        .collect();
                    let shift = (0..bn.gamma.len())
                        .map(|c| bn.beta[c] as f64 - bn.mean[c] as f64 * scale[c])
                        .collect();
                    L64::BnEval { scale, shift }
                }
                Layer::FakeQuant(a) => L64::FakeQuant {
                    scale: a.scale as f64,
                    lo: code_min(a.bits) as f64,
                    hi: code_max(a.bits) as f64,
                },
            })
        })
        .collect()
}

fn out_hw(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

fn apply(l: &L64, x: &T64) -> T64 {
    let n = x.batch();
    match l {
        L64::Linear { w, b, out, inp } => {
            let mut y = vec![0.0; n * out];
            for s in 0..n {
                let xr = x.row(s);
                for o in 0..*out {
                    y[s * out + o] = b[o] + (0..*inp).map(|i| w[o * inp + i] * xr[i]).sum::<f64>();
                }
            }
            T64::new(vec![n, *out], y)
        }
        L64::Conv { w, b, o, c, k, stride, pad } => {
            let (h, wd) = (x.shape[2], x.shape[3]);
            let (oh, ow) = (out_hw(h, *k, *stride, *pad), out_hw(wd, *k, *stride, *pad));
            let mut y = vec![0.0; n * o * oh * ow];
            for s in 0..n {
                for oc in 0..*o {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..*c {
                                for i in 0..*k {
                                    for j in 0..*k {
                                        let yy = (r * stride + i) as isize - *pad as isize;
                                        let xx = (q * stride + j) as isize - *pad as isize;
                                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        acc += w[((oc * c + ic) * k + i) * k + j]
                                            * x.data[((s * c + ic) * h + yy as usize) * wd + xx as usize];
                                    }
                                }
                            }
                            y[((s * o + oc) * oh + r) * ow + q] = acc;
                        }
                    }
                }
            }
            T64::new(vec![n, *o, oh, ow], y)
        }
        L64::Relu => T64::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect()),
        L64::MaxPool { k, s } | L64::AvgPool { k, s } => {
            let is_max = matches!(l, L64::MaxPool { .. });
            let (c, h, wd) = (x.shape[1], x.shape[2], x.shape[3]);
            let (oh, ow) = (out_hw(h, *k, *s, 0), out_hw(wd, *k, *s, 0));
            let mut y = Vec::with_capacity(n * c * oh * ow);
            for p in 0..n * c {
                for r in 0..oh {
                    for q in 0..ow {
                        let win = (0..*k).flat_map(|i| (0..*k).map(move |j| (i, j)));
                        let vals = win.map(|(i, j)| x.data[(p * h + r * s + i) * wd + q * s + j]);
                        y.push(if is_max {
                            vals.fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.sum::<f64>() / (k * k) as f64
                        });
                    }
                }
            }
            T64::new(vec![n, c, oh, ow], y)
        }
        L64::Flatten => T64::new(vec![n, x.data.len() / n], x.data.clone()),
        L64::BnEval { scale, shift } => {
            let c = x.shape[1];
            let per = x.data.len() / (n * c);
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / per) % c;
                    v * scale[ch] + shift[ch]
                })
                .collect();
            T64::new(x.shape.clone(), data)
        }
        L64::BnTrain { gamma, beta, eps } => {
            let c = x.shape[1];
            let per = x.data.len() / (n * c);
            let mut y = x.data.clone();
            for ch in 0..c {
                let idx = || (0..n).flat_map(move |s| (0..per).map(move |i| (s * c + ch) * per + i));
                let m = (n * per) as f64;
                let mean = idx().map(|i| x.data[i]).sum::<f64>() / m;
                let var = idx().map(|i| (x.data[i] - mean).powi(2)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                for i in idx() {
                    y[i] = gamma[ch] * (x.data[i] - mean) * inv + beta[ch];
                }
            }
            T64::new(x.shape.clone(), y)
        }
        L64::FakeQuant { scale, lo, hi } => T64::new(
            x.shape.clone(),
            x.data.iter().map(|&v| scale * (v / scale).round().clamp(*lo, *hi)).collect(),
        ),
    }
}

pub fn forward(layers: &[L64], x: &T64) -> T64 {
    layers.iter().fold(x.clone(), |cur, l| apply(l, &cur))
}

/// Forward pass keeping every layer input (index `len` is the output).
pub fn forward_all(layers: &[L64], x: &T64) -> Vec<T64> {
    let mut acts = vec![x.clone()];
    for l in layers {
        let y = apply(l, acts.last().expect("nonempty"));
        acts.push(y);
    }
    acts
}

/// Reverse pass for eval-mode networks; returns the weight gradient of every
/// conv/linear layer (empty for others) and the input gradient.
pub fn backward(layers: &[L64], acts: &[T64], grad_out: T64) -> Result<(Vec<Vec<f64>>, T64)> {
    let mut wg = vec![Vec::new(); layers.len()];
    let mut g = grad_out;
    for (li, l) in layers.iter().enumerate().rev() {
        let x = &acts[li];
        let n = x.batch();
        g = match l {
            L64::Linear { w, out, inp, .. } => {
                let mut gw = vec![0.0; out * inp];
                let mut gx = vec![0.0; n * inp];
                for s in 0..n {
                    let xr = x.row(s);
                    for o in 0..*out {
                        let go = g.data[s * out + o];
                        for i in 0..*inp {
                            gw[o * inp + i] += go * xr[i];
                            gx[s * inp + i] += go * w[o * inp + i];
                        }
                    }
                }
                wg[li] = gw;
                T64::new(x.shape.clone(), gx)
            }
            L64::Conv { w, o, c, k, stride, pad, .. } => {
                let (h, wd) = (x.shape[2], x.shape[3]);
                let (oh, ow) = (g.shape[2], g.shape[3]);
                let mut gw = vec![0.0; w.len()];
                let mut gx = vec![0.0; x.data.len()];
                for s in 0..n {
                    for oc in 0..*o {
                        for r in 0..oh {
                            for q in 0..ow {
                                let go = g.data[((s * o + oc) * oh + r) * ow + q];
                                for ic in 0..*c {
                                    for i in 0..*k {
                                        for j in 0..*k {
                                            let yy = (r * stride + i) as isize - *pad as isize;
                                            let xx = (q * stride + j) as isize - *pad as isize;
                                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((s * c + ic) * h + yy as usize) * wd + xx as usize;
                                            let wi = ((oc * c + ic) * k + i) * k + j;
                                            gw[wi] += go * x.data[xi];
                                            gx[xi] += go * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                wg[li] = gw;
                T64::new(x.shape.clone(), gx)
            }
            L64::Relu => T64::new(
                x.shape.clone(),
                x.data.iter().zip(&g.data).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
            ),
            L64::MaxPool { k, s } | L64::AvgPool { k, s } => {
                let is_max = matches!(l, L64::MaxPool { .. });
                let (c, h, wd) = (x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (g.shape[2], g.shape[3]);
                let mut gx = vec![0.0; x.data.len()];
                for p in 0..n * c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let go = g.data[(p * oh + r) * ow + q];
                            let cells: Vec<usize> = (0..*k)
                                .flat_map(|i| (0..*k).map(move |j| (p * h + r * s + i) * wd + q * s + j))
                                .collect();
                            if is_max {
                                let best = cells
                                    .iter()
                                    .copied()
                                    .fold(cells[0], |b, ci| if x.data[ci] > x.data[b] { ci } else { b });
                                gx[best] += go;
                            } else {
                                for ci in cells {
                                    gx[ci] += go / (k * k) as f64;
                                }
                            }
                        }
                    }
                }
                T64::new(x.shape.clone(), gx)
            }
            L64::Flatten => T64::new(x.shape.clone(), g.data.clone()),
            L64::BnEval { scale, .. } => {
                let c = x.shape[1];
                let per = x.data.len() / (n * c);
                T64::new(
                    x.shape.clone(),
                    g.data.iter().enumerate().map(|(i, &d)| d * scale[(i / per) % c]).collect(),
                )
            }
            L64::BnTrain { .. } | L64::FakeQuant { .. } => {
                return Err(Error::Parameter(
                    "reference backward supports eval-mode networks without activation quantizers".into(),
                ))
            }
        };
    }
    Ok((wg, g))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &T64, labels: &[usize]) -> (f64, T64) {
    let n = logits.batch();
    let k = logits.data.len() / n;
    let mut loss = 0.0;
    let mut g = vec![0.0; n * k];
    for s in 0..n {
        let r = logits.row(s);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - r[labels[s]];
        for c in 0..k {
            g[s * k + c] = ((r[c] - m).exp() / z - if c == labels[s] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, T64::new(logits.shape.clone(), g))
}

/// Smallest distance of any relu input to zero and of any max-pool winner to
/// its runner-up; finite-difference checks are only meaningful when this is
/// large relative to the perturbation.
pub fn kink_margin(layers: &[L64], x: &T64) -> f64 {
    let acts = forward_all(layers, x);
    let mut margin = f64::INFINITY;
    for (l, a) in layers.iter().zip(&acts) {
        match l {
            L64::Relu => {
                for &v in &a.data {
                    margin = margin.min(v.abs());
                }
            }
            L64::MaxPool { k, s } => {
                let (c, h, wd) = (a.shape[1], a.shape[2], a.shape[3]);
                let (oh, ow) = (out_hw(h, *k, *s, 0), out_hw(wd, *k, *s, 0));
                for p in 0..a.batch() * c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut v: Vec<f64> = (0..*k)
                                .flat_map(|i| (0..*k).map(move |j| (i, j)))
                                .map(|(i, j)| a.data[(p * h + r * s + i) * wd + q * s + j])
                                .collect();
                            v.sort_by(|a, b| b.total_cmp(a));
                            if v.len() > 1 {
                                margin = margin.min(v[0] - v[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Per-sample version of [`kink_margin`].
pub fn sample_margins(layers: &[L64], x: &T64) -> Vec<f64> {
    let r = x.data.len() / x.batch();
    let mut shape = x.shape.clone();
    shape[0] = 1;
    (0..x.batch())
        .map(|s| kink_margin(layers, &T64::new(shape.clone(), x.data[s * r..(s + 1) * r].to_vec())))
        .collect()
}
