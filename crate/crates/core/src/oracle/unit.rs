use rayon::prelude::*;
use serde::Serialize;

use super::fd_step;
use super::net64::{self, L64, T64};
use crate::calib::{UnitContext, UnitProblem};
use crate::error::{Error, Result};
use crate::model::Layer;

/// Largest weight count for exhaustive search (3^12 assignments).
pub const BRUTE_FORCE_MAX: usize = 12;

struct Cached {
    layers: Vec<L64>,
    qpos: Vec<usize>,
    x: T64,
    z: T64,
    f: T64,
}

impl Cached {
    fn new(layers: &[Layer], ctx: &UnitContext, samples: Option<&[usize]>) -> Result<Self> {
        let pick = |t: &crate::tensor::Tensor| match samples {
            Some(s) => T64::from_f32(&t.select_rows(s)),
            None => T64::from_f32(t),
        };
        let l64 = net64::convert(layers, false)?;
        let qpos = l64.iter().enumerate().filter(|(_, l)| l.is_affine()).map(|(i, _)| i).collect();
        Ok(Self {
            layers: l64,
            qpos,
            x: pick(&ctx.inputs),
            z: pick(&ctx.targets),
            f: pick(&ctx.fisher),
        })
    }

    fn objective(&self, layers: &[L64]) -> f64 {
        let y = net64::forward(layers, &self.x);
        let s: f64 = y
            .data
            .iter()
            .zip(&self.z.data)
            .zip(&self.f.data)
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum();
        s / self.x.batch() as f64
    }
}

/// Unit objective of an assignment, evaluated in f64.
pub fn objective64(problem: &UnitProblem<'_>, assignment: &[Vec<u8>]) -> Result<f64> {
    let c = Cached::new(&problem.layers, problem.context, None)?;
    let mut layers = c.layers.clone();
    for ((&p, cands), a) in c.qpos.iter().zip(&problem.candidates).zip(assignment) {
        let w = layers[p].weights_mut().expect("affine");
        for ((dst, v), &k) in w.iter_mut().zip(&cands.values).zip(a) {
            *dst = v[k as usize] as f64;
        }
    }
    Ok(c.objective(&layers))
}

/// Relaxed objective in f64: each weight is `Σ_k V_k softmax(a/t)_k`.
pub fn relaxed_objective64(problem: &UnitProblem<'_>, logits: &[Vec<[f64; 3]>], t: f64, samples: &[usize]) -> Result<f64> {
    let c = Cached::new(&problem.layers, problem.context, Some(samples))?;
    let mut layers = c.layers.clone();
    for ((&p, cands), a) in c.qpos.iter().zip(&problem.candidates).zip(logits) {
        let w = layers[p].weights_mut().expect("affine");
        for ((dst, v), a) in w.iter_mut().zip(&cands.values).zip(a) {
            let m = a[0].max(a[1]).max(a[2]);
            let e = a.map(|x| ((x - m) / t).exp());
            let s = e[0] + e[1] + e[2];
            *dst = (0..3).map(|k| v[k] as f64 * e[k] / s).sum();
        }
    }
    Ok(c.objective(&layers))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForce {
    pub assignment: Vec<Vec<u8>>,
    pub objective: f64,
    pub evaluated: usize,
}

/// Exact minimiser over all `3^n` assignments; ties go to the
/// lexicographically first (first weight most significant).
pub fn brute_force_unit(problem: &UnitProblem<'_>) -> Result<BruteForce> {
    let n = problem.weight_count();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Size {
            what: "brute-force weights",
            actual: n,
            limit: BRUTE_FORCE_MAX,
        });
    }
    let c = Cached::new(&problem.layers, problem.context, None)?;
    let values: Vec<[f64; 3]> = problem
        .candidates
        .iter()
        .flat_map(|cs| cs.values.iter().map(|v| v.map(|x| x as f64)))
        .collect();
    let sizes: Vec<usize> = problem.candidates.iter().map(|cs| cs.len()).collect();
    let total = 3usize.pow(n as u32);
    let decode = |mut code: usize| {
        let mut digits = vec![0u8; n];
        for d in digits.iter_mut().rev() {
            *d = (code % 3) as u8;
            code /= 3;
        }
        digits
    };
    let (best_obj, best_code) = (0..total)
        .into_par_iter()
        .map_init(
            || c.layers.clone(),
            |layers, code| {
                let digits = decode(code);
                let mut k = 0;
                for (&p, &sz) in c.qpos.iter().zip(&sizes) {
                    let w = layers[p].weights_mut().expect("affine");
                    for dst in w.iter_mut().take(sz) {
                        *dst = values[k][digits[k] as usize];
                        k += 1;
                    }
                }
                (c.objective(layers), code)
            },
        )
        .reduce(
            || (f64::INFINITY, usize::MAX),
            |a, b| {
                if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    let digits = decode(best_code);
    let mut assignment = Vec::with_capacity(sizes.len());
    let mut k = 0;
    for &sz in &sizes {
        assignment.push(digits[k..k + sz].to_vec());
        k += sz;
    }
    Ok(BruteForce {
        assignment,
        objective: best_obj,
        evaluated: total,
    })
}

/// `mean_n ‖√F_n · Σ_k J_k Δw_k‖²` with each Jacobian `J_k = ∂z/∂w_k` built
/// column by column from central differences at the weights in `layers`.
pub fn jacobian_objective(layers: &[Layer], deltas: &[Vec<f64>], ctx: &UnitContext) -> Result<f64> {
    let c = Cached::new(layers, ctx, None)?;
    if deltas.len() != c.qpos.len() {
        return Err(Error::Parameter(format!(
            "{} weight perturbations for {} quantizable layers",
            deltas.len(),
            c.qpos.len()
        )));
    }
    let out_per_sample = c.z.data.len() / c.z.batch().max(1);
    let weights: usize = c.qpos.iter().map(|&p| c.layers[p].weights().expect("affine").len()).sum();
    if out_per_sample * weights > super::DENSE_BUDGET * super::DENSE_BUDGET {
        return Err(Error::Size {
            what: "jacobian entries",
            actual: out_per_sample * weights,
            limit: super::DENSE_BUDGET * super::DENSE_BUDGET,
        });
    }
    let mut jd = vec![0.0; c.z.data.len()];
    for (&p, d) in c.qpos.iter().zip(deltas) {
        let w0 = c.layers[p].weights().expect("affine").to_vec();
        if d.len() != w0.len() {
            return Err(Error::Parameter(format!(
                "perturbation has {} entries, layer has {}",
                d.len(),
                w0.len()
            )));
        }
        let cols: Vec<Vec<f64>> = (0..w0.len())
            .into_par_iter()
            .map(|e| {
                let mut l = c.layers.clone();
                let h = fd_step(w0[e]);
                l[p].weights_mut().expect("affine")[e] = w0[e] + h;
                let up = net64::forward(&l, &c.x);
                l[p].weights_mut().expect("affine")[e] = w0[e] - h;
                let down = net64::forward(&l, &c.x);
                up.data.iter().zip(&down.data).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        for (col, &de) in cols.iter().zip(d) {
            for (acc, &j) in jd.iter_mut().zip(col) {
                *acc += j * de;
            }
        }
    }
    let s: f64 = jd.iter().zip(&c.f.data).map(|(v, f)| f * v * v).sum();
    Ok(s / c.x.batch() as f64)
}
