//! Fisher-weighted reconstruction objective at a unit's output tap.

use crate::autodiff::{self, Gradients, Mode};
use crate::error::{dim_err, Error, Result};
use crate::model::{Layer, ModelGraph};
use crate::ops;
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// Cached unit inputs, float targets at the tap, and per-element weights.
#[derive(Debug, Clone)]
pub struct UnitContext {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub fisher: Tensor,
}

impl UnitContext {
    pub fn new(inputs: Tensor, targets: Tensor, fisher: Tensor) -> Result<Self> {
        if inputs.batch() != targets.batch() {
            return Err(dim_err(
                "unit context",
                format!("{} inputs vs {} targets", inputs.batch(), targets.batch()),
            ));
        }
        if targets.shape() != fisher.shape() {
            return Err(dim_err(
                "unit context",
                format!("targets {:?} vs fisher {:?}", targets.shape(), fisher.shape()),
            ));
        }
        if fisher.data().iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
            return Err(Error::Data("fisher weights must be finite and >= 0".into()));
        }
        Ok(Self {
            inputs,
            targets,
            fisher,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rescales the weights to unit mean; all-zero weights stay zero.
    pub fn normalize_fisher(&mut self) {
        let mean = self.fisher.data().iter().map(|&f| f as f64).sum::<f64>() / self.fisher.len().max(1) as f64;
        if mean > 0.0 {
            for f in self.fisher.data_mut() {
                *f = (*f as f64 / mean) as f32;
            }
        }
    }
}

/// Per-sample squared loss gradient at the output of layer `tap`, from the
/// float reference model and the given labels.
pub fn fisher_weights(reference: &ModelGraph, inputs: &Tensor, labels: &[usize], tap: usize) -> Result<Tensor> {
    let mut cache = tap_cache(reference, inputs, labels, &[tap])?;
    Ok(cache.fisher.pop().expect("one tap"))
}

/// Float targets and Fisher weights for several taps from one pass.
#[derive(Debug, Clone)]
pub struct TapCache {
    pub targets: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
}

pub fn tap_cache(reference: &ModelGraph, inputs: &Tensor, labels: &[usize], taps: &[usize]) -> Result<TapCache> {
    let n = inputs.batch();
    if labels.len() != n {
        return Err(Error::Data(format!("{n} calibration inputs but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("calibration set is empty".into()));
    }
    for &t in taps {
        if !reference.layers.get(t).is_some_and(Layer::is_quantizable) {
            return Err(Error::Structure(format!("tap {t} is not a conv or linear layer")));
        }
    }
    let mut targets: Vec<Vec<Tensor>> = vec![Vec::new(); taps.len()];
    let mut fisher: Vec<Vec<Tensor>> = vec![Vec::new(); taps.len()];
    let mut s = 0;
    while s < n {
        let c = CHUNK.min(n - s);
        let x = inputs.rows(s, c);
        let trace = autodiff::forward_trace(&reference.layers, &x, Mode::Eval)?;
        let ce = ops::softmax_cross_entropy(trace.output(), &labels[s..s + c])?;
        // gradient of the chunk-mean loss times the chunk size is the per-sample gradient
        let mut g = ce.grad;
        for v in g.data_mut() {
            *v *= c as f32;
        }
        let grads = autodiff::backward(&reference.layers, &trace, g)?;
        for (k, &t) in taps.iter().enumerate() {
            targets[k].push(trace.activation(t + 1).clone());
            let mut f = grads.pre_activations[t].clone().expect("tap is quantizable");
            for v in f.data_mut() {
                *v *= *v;
            }
            fisher[k].push(f);
        }
        s += c;
    }
    Ok(TapCache {
        targets: targets.iter().map(|p| Tensor::concat_rows(p)).collect::<Result<_>>()?,
        fisher: fisher.iter().map(|p| Tensor::concat_rows(p)).collect::<Result<_>>()?,
    })
}

fn weighted_error(out: &Tensor, target: &Tensor, fisher: &Tensor) -> Result<f64> {
    if out.shape() != target.shape() {
        return Err(dim_err(
            "unit objective",
            format!("unit output {:?} vs target {:?}", out.shape(), target.shape()),
        ));
    }
    Ok(out
        .data()
        .iter()
        .zip(target.data())
        .zip(fisher.data())
        .map(|((&o, &z), &f)| {
            let d = o as f64 - z as f64;
            f as f64 * d * d
        })
        .sum())
}

fn check_samples(ctx: &UnitContext, samples: &[usize]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("objective needs a nonempty sample shard".into()));
    }
    if let Some(&bad) = samples.iter().find(|&&i| i >= ctx.len()) {
        return Err(Error::Data(format!("sample {bad} outside a context of {}", ctx.len())));
    }
    Ok(())
}

/// `mean_n Σ_j F_nj (ẑ_nj − z_nj)²` over `samples`, with `ẑ` the output of
/// `layers` on the cached unit inputs.
pub fn unit_objective(layers: &[Layer], ctx: &UnitContext, samples: &[usize]) -> Result<f64> {
    check_samples(ctx, samples)?;
    let mut total = 0.0;
    for chunk in samples.chunks(CHUNK) {
        let out = autodiff::forward(layers, &ctx.inputs.select_rows(chunk), Mode::Eval)?;
        total += weighted_error(&out, &ctx.targets.select_rows(chunk), &ctx.fisher.select_rows(chunk))?;
    }
    Ok(total / samples.len() as f64)
}

/// Objective over every cached sample.
pub fn unit_objective_full(layers: &[Layer], ctx: &UnitContext) -> Result<f64> {
    let all: Vec<usize> = (0..ctx.len()).collect();
    unit_objective(layers, ctx, &all)
}

/// Objective and its gradients with respect to every parameter of `layers`.
pub fn unit_objective_grad(layers: &[Layer], ctx: &UnitContext, samples: &[usize]) -> Result<(f64, Gradients)> {
    check_samples(ctx, samples)?;
    let x = ctx.inputs.select_rows(samples);
    let z = ctx.targets.select_rows(samples);
    let f = ctx.fisher.select_rows(samples);
    let trace = autodiff::forward_trace(layers, &x, Mode::Eval)?;
    let out = trace.output();
    let obj = weighted_error(out, &z, &f)? / samples.len() as f64;
    let scale = 2.0 / samples.len() as f64;
    let g: Vec<f32> = out
        .data()
        .iter()
        .zip(z.data())
        .zip(f.data())
        .map(|((&o, &t), &w)| (scale * w as f64 * (o as f64 - t as f64)) as f32)
        .collect();
    let grads = autodiff::backward(layers, &trace, Tensor::new(out.shape().to_vec(), g)?)?;
    Ok((obj, grads))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::testutil::{rand_tensor, tiny_cnn};
    use crate::model::{fold_batchnorm, ModelGraph};

    #[test]
    fn single_linear_layer_fisher_is_squared_softmax_residual() {
        let w = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.2, 0.3, -0.7, 1.1]).unwrap();
        let b = vec![0.1, 0.0, -0.2];
        let g = ModelGraph::new(vec![Layer::linear(w.clone(), b.clone())], vec![2], 3).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.8, -0.4]).unwrap();
        let f = fisher_weights(&g, &x, &[2], 0).unwrap();
        let z: Vec<f64> = (0..3)
            .map(|o| b[o] as f64 + 0.8 * w.data()[o * 2] as f64 - 0.4 * w.data()[o * 2 + 1] as f64)
            .collect();
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for o in 0..3 {
            let r = z[o].exp() / s - if o == 2 { 1.0 } else { 0.0 };
            assert_relative_eq!(f.data()[o] as f64, r * r, max_relative = 1e-5);
        }
    }

    #[test]
    fn constant_output_network_has_zero_fisher() {
        let g = ModelGraph::new(
            vec![
                Layer::linear(Tensor::zeros(&[4, 3]), vec![0.0; 4]),
                Layer::Relu,
                Layer::linear(Tensor::zeros(&[3, 4]), vec![0.0; 3]),
            ],
            vec![3],
            3,
        )
        .unwrap();
        let x = Tensor::full(&[5, 3], 1.0);
        let f = fisher_weights(&g, &x, &[0, 1, 2, 0, 1], 0).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_tap_fisher_invariant_to_logit_shift() {
        let g = fold_batchnorm(&tiny_cnn(3)).unwrap();
        let mut shifted = g.clone();
        let last = shifted.layers.len() - 1;
        for b in shifted.layers[last].bias_mut().unwrap() {
            *b += 2.5;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[6, 1, 6, 6], 1.0);
        let labels = [0, 1, 2, 3, 4, 0];
        let tap = g.quantizable_indices()[1];
        let a = fisher_weights(&g, &x, &labels, tap).unwrap();
        let b = fisher_weights(&shifted, &x, &labels, tap).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn one_by_one_conv_closed_form() {
        let ctx = UnitContext::new(
            Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap(),
            Tensor::new(vec![1, 1, 1, 1], vec![0.6]).unwrap(),
            Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
        )
        .unwrap();
        let w = 0.4f32;
        let dw = 0.1f32;
        let layer = Layer::conv(Tensor::new(vec![1, 1, 1, 1], vec![w + dw]).unwrap(), vec![0.0], 1, 0);
        let obj = unit_objective(&[layer], &ctx, &[0]).unwrap();
        let expect = 2.0 * (dw as f64 * 1.5).powi(2);
        assert_relative_eq!(obj, expect, max_relative = 1e-6);
    }

    #[test]
    fn zero_perturbation_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![Layer::linear(rand_tensor(&mut rng, &[3, 4], 1.0), vec![0.1; 3])];
        let x = rand_tensor(&mut rng, &[7, 4], 1.0);
        let z = autodiff::forward(&layers, &x, Mode::Eval).unwrap();
        let f = rand_tensor(&mut rng, &[7, 3], 1.0);
        let f = Tensor::new(vec![7, 3], f.data().iter().map(|v| v.abs()).collect()).unwrap();
        let ctx = UnitContext::new(x, z, f).unwrap();
        assert_eq!(unit_objective_full(&layers, &ctx).unwrap(), 0.0);
        assert!(matches!(unit_objective(&layers, &ctx, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn unit_fisher_reduces_to_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = vec![
            Layer::linear(rand_tensor(&mut rng, &[5, 4], 1.0), vec![0.0; 5]),
            Layer::Relu,
            Layer::linear(rand_tensor(&mut rng, &[3, 5], 1.0), vec![0.0; 3]),
        ];
        let x = rand_tensor(&mut rng, &[9, 4], 1.0);
        let z = rand_tensor(&mut rng, &[9, 3], 1.0);
        let ctx = UnitContext::new(x.clone(), z.clone(), Tensor::full(&[9, 3], 1.0)).unwrap();
        let out = autodiff::forward(&layers, &x, Mode::Eval).unwrap();
        let sse: f64 = out
            .data()
            .iter()
            .zip(z.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let mse_per_sample = sse / 9.0;
        assert_relative_eq!(unit_objective_full(&layers, &ctx).unwrap(), mse_per_sample, max_relative = 1e-9);
    }

    #[test]
    fn normalization_gives_unit_mean() {
        let mut ctx = UnitContext::new(
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 2]),
            Tensor::new(vec![2, 2], vec![1e-6, 3e-6, 0.0, 4e-6]).unwrap(),
        )
        .unwrap();
        ctx.normalize_fisher();
        let m: f32 = ctx.fisher.data().iter().sum::<f32>() / 4.0;
        assert_relative_eq!(m, 1.0, max_relative = 1e-6);
        assert!(UnitContext::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]), Tensor::full(&[1, 1], -1.0)).is_err());
    }
}
