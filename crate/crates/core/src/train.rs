//! Float baseline: reference architecture, SGD trainer, accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamGrad, Tape};
use crate::error::{Error, Result};
use crate::model::{BatchNorm, Layer, ModelGraph};
use crate::tensor::{Batch, Tensor};

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// conv16-bn-relu-maxpool / conv32-bn-relu-maxpool / 3 × (conv64-bn-relu)
/// with a global average pool before the classifier. All convs are 3×3,
/// stride 1, pad 1. Requires spatial size divisible by 4.
pub fn reference_cnn(input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    let &[c, h, w] = input_shape else {
        return Err(Error::Parameter(format!("expected C×H×W input, got {input_shape:?}")));
    };
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Parameter(format!("spatial size {h}×{w} must be a positive multiple of 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let block = |layers: &mut Vec<Layer>, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
        layers.push(Layer::conv(he_tensor(rng, &[cout, cin, 3, 3]), vec![0.0; cout], 1, 1));
        layers.push(Layer::BatchNorm(BatchNorm::identity(cout)));
        layers.push(Layer::Relu);
    };
    block(&mut layers, c, 16, &mut rng);
    layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
    block(&mut layers, 16, 32, &mut rng);
    layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
    block(&mut layers, 32, 64, &mut rng);
    block(&mut layers, 64, 64, &mut rng);
    block(&mut layers, 64, 64, &mut rng);
    let (ph, pw) = (h / 4, w / 4);
    if ph != pw {
        return Err(Error::Parameter(format!("square inputs required, got {h}×{w}")));
    }
    layers.push(Layer::AvgPool { kernel: ph, stride: ph });
    layers.push(Layer::Flatten);
    let lw = he_tensor(&mut rng, &[classes, 64]);
    layers.push(Layer::linear(lw, vec![0.0; classes]));
    ModelGraph::new(layers, input_shape.to_vec(), classes)
}

/// Flatten followed by `hidden.len()` relu layers and a linear classifier.
pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::Flatten];
    let mut width: usize = input_shape.iter().product();
    for &h in hidden {
        layers.push(Layer::linear(he_tensor(&mut rng, &[h, width]), vec![0.0; h]));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::linear(he_tensor(&mut rng, &[classes, width]), vec![0.0; classes]));
    ModelGraph::new(layers, input_shape.to_vec(), classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Running-statistics momentum of batch-norm layers.
    pub bn_momentum: f32,
    pub seed: u64,
    /// Train on the first `n` samples only.
    pub subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            seed: 0,
            subset: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f32,
    pub train_top1: f64,
}

/// Per-layer momentum buffers, one per parameter slot.
struct Velocity(Vec<Vec<Vec<f32>>>);

impl Velocity {
    fn new(graph: &ModelGraph) -> Self {
        Self(
            graph
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d(_) | Layer::Linear(_) => vec![
                        vec![0.0; l.weight().expect("affine").len()],
                        vec![0.0; l.bias().expect("affine").len()],
                    ],
                    Layer::BatchNorm(bn) => vec![vec![0.0; bn.gamma.len()]; 2],
                    _ => Vec::new(),
                })
                .collect(),
        )
    }
}

fn momentum_step(p: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, mu: f32, wd: f32) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Mini-batch SGD with momentum and a cosine learning-rate schedule.
/// Batch-norm layers normalise with batch statistics and update running
/// statistics with the unbiased batch variance.
pub fn train(graph: &mut ModelGraph, data: &Batch, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Parameter("epochs and batch size must be >= 1".into()));
    }
    let n = cfg.subset.map_or(data.len(), |s| s.min(data.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea1);
    let mut vel = Velocity::new(graph);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let mut logs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // a single-sample batch has no variance for batch-norm
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let lr = (0.5 * cfg.lr as f64 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos())) as f32;
            step += 1;
            let (loss, grads, stats, preds) = {
                let mut tape = Tape::new(graph, Mode::Train);
                let loss = tape.forward(&batch)?;
                let grads = tape.backward()?;
                let trace = tape.trace().expect("forward ran");
                let stats: Vec<Option<(Vec<f32>, Vec<f32>, usize)>> = (0..graph.layers.len())
                    .map(|i| {
                        trace.bn_batch_stats(i).map(|(m, v)| {
                            let count = trace.activation(i).len() / m.len();
                            (m.to_vec(), v.to_vec(), count)
                        })
                    })
                    .collect();
                (loss, grads, stats, predictions(trace.output()))
            };
            if !loss.is_finite() {
                return Err(Error::Data(format!("training loss became non-finite at epoch {epoch}")));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            for (i, layer) in graph.layers.iter_mut().enumerate() {
                let v = &mut vel.0[i];
                match (layer, &grads.params[i]) {
                    (Layer::Conv2d(c), ParamGrad::Affine { weight, bias }) => {
                        momentum_step(c.weight.data_mut(), weight, &mut v[0], lr, cfg.momentum, cfg.weight_decay);
                        momentum_step(&mut c.bias, bias, &mut v[1], lr, cfg.momentum, 0.0);
                    }
                    (Layer::Linear(l), ParamGrad::Affine { weight, bias }) => {
                        momentum_step(l.weight.data_mut(), weight, &mut v[0], lr, cfg.momentum, cfg.weight_decay);
                        momentum_step(&mut l.bias, bias, &mut v[1], lr, cfg.momentum, 0.0);
                    }
                    (Layer::BatchNorm(bn), ParamGrad::BatchNorm { gamma, beta }) => {
                        momentum_step(&mut bn.gamma, gamma, &mut v[0], lr, cfg.momentum, 0.0);
                        momentum_step(&mut bn.beta, beta, &mut v[1], lr, cfg.momentum, 0.0);
                        let (mean, var, count) = stats[i].as_ref().expect("train-mode batch-norm records stats");
                        let unbias = *count as f32 / (*count as f32 - 1.0).max(1.0);
                        let m = cfg.bn_momentum;
                        for c in 0..bn.mean.len() {
                            bn.mean[c] = (1.0 - m) * bn.mean[c] + m * mean[c];
                            bn.var[c] = (1.0 - m) * bn.var[c] + m * var[c] * unbias;
                        }
                    }
                    _ => {}
                }
            }
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: (loss_sum / n as f64) as f32,
            train_top1: correct as f64 / n as f64,
        });
    }
    Ok(logs)
}

/// Argmax per row, ties to the lower class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|r| {
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Whether `label` ranks within the `k` largest logits, ties ranked by lower
/// class index first.
pub fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let y = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > y || (v == y && c < label))
        .count();
    ahead < k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub samples: usize,
}

/// Top-1 and top-k accuracy over `data`.
pub fn evaluate(graph: &ModelGraph, data: &Batch, k: usize) -> Result<Accuracy> {
    if data.inputs.shape()[1..] != graph.input_shape[..] {
        return Err(Error::Data(format!(
            "dataset samples {:?} do not match model input {:?}",
            &data.inputs.shape()[1..],
            graph.input_shape
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= graph.classes) {
        return Err(Error::Data(format!(
            "dataset label {bad} exceeds the model's {} classes",
            graph.classes
        )));
    }
    let logits = graph.forward_chunked(&data.inputs, 256)?;
    Ok(accuracy_from_logits(&logits, &data.labels, k))
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize], k: usize) -> Accuracy {
    let kk = logits.row_len();
    let (mut c1, mut ck) = (0usize, 0usize);
    for (row, &y) in logits.data().chunks(kk).zip(labels) {
        c1 += usize::from(in_top_k(row, y, 1));
        ck += usize::from(in_top_k(row, y, k));
    }
    let n = labels.len().max(1) as f64;
    Accuracy {
        top1: c1 as f64 / n,
        topk: ck as f64 / n,
        k,
        samples: labels.len(),
    }
}
