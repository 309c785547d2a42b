use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::objective::{unit_objective_full, unit_objective_grad, UnitContext};
use super::CalibConfig;
use crate::autodiff::{self, Mode, ParamGrad};
use crate::error::Result;
use crate::model::Layer;
use crate::quant::{percentile_scale, MIN_ACT_SCALE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct PactOutcome {
    /// `(position in the unit's layers, learned scale)` per activation quantizer.
    pub scales: Vec<(usize, f32)>,
    pub obj_before: f64,
    pub obj_after: f64,
    pub reverted: bool,
}

fn fakequant_positions(layers: &[Layer]) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::FakeQuant(_)))
        .map(|(i, _)| i)
        .collect()
}

fn set_scale(layer: &mut Layer, s: f32) {
    if let Layer::FakeQuant(a) = layer {
        a.scale = s;
    }
}

fn get_scale(layer: &Layer) -> f32 {
    match layer {
        Layer::FakeQuant(a) => a.scale,
        _ => unreachable!("position holds an activation quantizer"),
    }
}

/// Sets the activation quantizers in `only` (positions within `layers`) to the
/// `quantile` of the absolute activations they see on `inputs`.
pub fn init_act_scales(layers: &mut [Layer], inputs: &Tensor, quantile: f64, only: &[usize]) -> Result<()> {
    let mut cur = inputs.clone();
    for i in 0..layers.len() {
        if only.contains(&i) {
            if let Layer::FakeQuant(a) = &layers[i] {
                let s = percentile_scale(cur.data(), quantile, a.bits);
                set_scale(&mut layers[i], s);
            }
        }
        cur = autodiff::forward(&layers[i..=i], &cur, Mode::Eval)?;
    }
    Ok(())
}

/// SGD on the activation scales inside `layers` against the unit objective,
/// keeping the starting scales if the result scores worse on the full context.
pub fn pact_learn_scales(layers: &mut [Layer], ctx: &UnitContext, cfg: &CalibConfig, seed: u64) -> Result<PactOutcome> {
    let pos = fakequant_positions(layers);
    let obj_before = unit_objective_full(layers, ctx)?;
    if pos.is_empty() || !cfg.act_quant_enabled() {
        return Ok(PactOutcome {
            scales: Vec::new(),
            obj_before,
            obj_after: obj_before,
            reverted: false,
        });
    }
    let start: Vec<f32> = pos.iter().map(|&p| get_scale(&layers[p])).collect();
    let n = ctx.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9ac7));
    let shard_len = cfg.shard_size.min(n);
    let mut shard = vec![0usize; shard_len];
    for step in 0..cfg.pact_steps {
        for (i, s) in shard.iter_mut().enumerate() {
            *s = order[(step * shard_len + i) % n];
        }
        let (_, grads) = unit_objective_grad(layers, ctx, &shard)?;
        for &p in &pos {
            if let ParamGrad::Scale(g) = grads.params[p] {
                let s = (get_scale(&layers[p]) - cfg.lr_act * g).max(MIN_ACT_SCALE);
                set_scale(&mut layers[p], s);
            }
        }
    }
    let mut obj_after = unit_objective_full(layers, ctx)?;
    let reverted = !(obj_after <= obj_before);
    if reverted {
        for (&p, &s) in pos.iter().zip(&start) {
            set_scale(&mut layers[p], s);
        }
        obj_after = obj_before;
    }
    Ok(PactOutcome {
        scales: pos.iter().map(|&p| (p, get_scale(&layers[p]))).collect(),
        obj_before,
        obj_after,
        reverted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActQuant;
    use crate::quant::code_max;

    fn unit(scale: f32) -> Vec<Layer> {
        vec![
            Layer::FakeQuant(ActQuant { bits: 4, scale }),
            Layer::linear(Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0]),
        ]
    }

    #[test]
    fn on_grid_activations_are_a_fixed_point() {
        let x = Tensor::new(vec![2, 4], vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]).unwrap();
        let z = Tensor::new(vec![2, 1], vec![3.0, 11.0]).unwrap();
        let ctx = UnitContext::new(x, z, Tensor::full(&[2, 1], 1.0)).unwrap();
        let mut layers = unit(0.5);
        let cfg = CalibConfig {
            act_bits: 4,
            lr_act: 0.1,
            pact_steps: 20,
            ..CalibConfig::default()
        };
        let out = pact_learn_scales(&mut layers, &ctx, &cfg, 0).unwrap();
        assert_eq!(out.scales, vec![(0, 0.5)]);
        assert_eq!(out.obj_after, 0.0);
    }

    #[test]
    fn outlier_clip_beats_max_abs_scale() {
        let mut data: Vec<f32> = (0..4000).map(|i| (i % 17) as f32 * 0.06).collect();
        data[3] = 40.0;
        let x = Tensor::new(vec![1000, 4], data).unwrap();
        let float = unit(1.0)[1..].to_vec();
        let z = autodiff::forward(&float, &x, Mode::Eval).unwrap();
        let ctx = UnitContext::new(x.clone(), z, Tensor::full(&[1000, 1], 1.0)).unwrap();
        let cfg = CalibConfig {
            act_bits: 4,
            lr_act: 1e-3,
            pact_steps: 50,
            ..CalibConfig::default()
        };
        let mut layers = unit(1.0);
        init_act_scales(&mut layers, &x, 0.999, &[0]).unwrap();
        let out = pact_learn_scales(&mut layers, &ctx, &cfg, 0).unwrap();
        let learned = out.scales[0].1;
        assert!(learned * (code_max(4) as f32) < 40.0);
        let max_abs = unit(40.0 / code_max(4) as f32);
        let baseline = unit_objective_full(&max_abs, &ctx).unwrap();
        assert!(out.obj_after < baseline, "{} vs {baseline}", out.obj_after);
        assert!(out.obj_after <= out.obj_before);
    }

    #[test]
    fn disabled_in_full_precision_mode() {
        let x = Tensor::full(&[1, 4], 1.0);
        let ctx = UnitContext::new(x, Tensor::full(&[1, 1], 4.0), Tensor::full(&[1, 1], 1.0)).unwrap();
        let out = pact_learn_scales(&mut unit(0.5), &ctx, &CalibConfig::default(), 0).unwrap();
        assert!(out.scales.is_empty());
    }
}
