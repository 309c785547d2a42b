use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::objective::{unit_objective, unit_objective_full, unit_objective_grad, UnitContext};
use super::relax::{anneal, softmax3, CandidateDistribution};
use super::CalibConfig;
use crate::error::{Error, Result};
use crate::model::Layer;
use crate::quant::CandidateSet;

/// One unit's layers together with the candidate sets of its conv/linear layers.
#[derive(Debug, Clone)]
pub struct UnitProblem<'a> {
    /// Index used in diagnostics.
    pub unit: usize,
    pub layers: Vec<Layer>,
    /// Positions of the quantizable layers within `layers`.
    pub qpos: Vec<usize>,
    pub candidates: Vec<CandidateSet>,
    pub context: &'a UnitContext,
}

impl<'a> UnitProblem<'a> {
    pub fn new(unit: usize, layers: Vec<Layer>, candidates: Vec<CandidateSet>, context: &'a UnitContext) -> Result<Self> {
        let qpos: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_quantizable())
            .map(|(i, _)| i)
            .collect();
        if qpos.len() != candidates.len() {
            return Err(Error::Structure(format!(
                "unit {unit} has {} quantizable layers but {} candidate sets",
                qpos.len(),
                candidates.len()
            )));
        }
        for (&p, c) in qpos.iter().zip(&candidates) {
            let n = layers[p].weight().expect("quantizable").len();
            if c.len() != n {
                return Err(Error::Structure(format!(
                    "unit {unit}: layer at position {p} has {n} weights but {} candidates",
                    c.len()
                )));
            }
        }
        if context.is_empty() {
            return Err(Error::Data(format!("unit {unit} has an empty calibration context")));
        }
        Ok(Self {
            unit,
            layers,
            qpos,
            candidates,
            context,
        })
    }

    pub fn weight_count(&self) -> usize {
        self.candidates.iter().map(CandidateSet::len).sum()
    }

    /// Every weight at its middle (round-to-nearest) candidate.
    pub fn middle_assignment(&self) -> Vec<Vec<u8>> {
        self.candidates.iter().map(|c| vec![1; c.len()]).collect()
    }

    fn write_values(layers: &mut [Layer], qpos: &[usize], values: &[Vec<f32>]) {
        for (&p, v) in qpos.iter().zip(values) {
            layers[p].weight_mut().expect("quantizable").data_mut().copy_from_slice(v);
        }
    }

    pub fn layers_for_values(&self, values: &[Vec<f32>]) -> Vec<Layer> {
        let mut l = self.layers.clone();
        Self::write_values(&mut l, &self.qpos, values);
        l
    }

    pub fn layers_for_assignment(&self, assignment: &[Vec<u8>]) -> Vec<Layer> {
        let values: Vec<Vec<f32>> = self
            .candidates
            .iter()
            .zip(assignment)
            .map(|(c, a)| c.select_values(a))
            .collect();
        self.layers_for_values(&values)
    }

    /// Objective of a discrete assignment over the full context.
    pub fn objective(&self, assignment: &[Vec<u8>]) -> Result<f64> {
        unit_objective_full(&self.layers_for_assignment(assignment), self.context)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitOutcome {
    #[serde(skip)]
    pub assignment: Vec<Vec<u8>>,
    /// Full-context objective of the starting (middle) assignment.
    pub obj_before: f64,
    /// Full-context objective of the returned assignment.
    pub obj_after: f64,
    pub steps: usize,
    pub final_temperature: f32,
    /// Smallest winning probability across the unit's weights at the end.
    pub min_max_prob: f32,
    /// Weights whose winning probability ends below [`DECIDED`].
    pub undecided: usize,
    /// Weights whose final choice differs from the middle candidate.
    pub changed: usize,
    /// The relaxed solution scored worse than the start and was discarded.
    pub reverted: bool,
}

/// Winning probability above which a weight counts as decided.
pub const DECIDED: f32 = 0.999;

/// Anneals per-weight candidate distributions by SGD on the logits and
/// returns the argmax assignment.
pub fn optimize_unit(problem: &UnitProblem<'_>, cfg: &CalibConfig, seed: u64) -> Result<UnitOutcome> {
    cfg.validate()?;
    let ctx = problem.context;
    let n = ctx.len();
    let mut dists: Vec<CandidateDistribution> = problem
        .candidates
        .iter()
        .map(|c| CandidateDistribution::biased(c.len(), cfg.logit_init, cfg.t_start))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let start = problem.middle_assignment();
    let obj_before = problem.objective(&start)?;
    let lr = if cfg.relative_objective && obj_before > 0.0 {
        cfg.lr_logits as f64 / obj_before
    } else {
        cfg.lr_logits as f64
    };
    let shard_len = cfg.shard_size.min(n);
    let mut work = problem.layers.clone();
    let mut shard = vec![0usize; shard_len];
    for step in 0..cfg.steps {
        let t = anneal(step, cfg.steps, cfg.t_start, cfg.t_end);
        let values: Vec<Vec<f32>> = dists
            .iter_mut()
            .zip(&problem.candidates)
            .map(|(d, c)| {
                d.temperature = t;
                d.expected_values(c)
            })
            .collect();
        UnitProblem::write_values(&mut work, &problem.qpos, &values);
        for (i, s) in shard.iter_mut().enumerate() {
            *s = order[(step * shard_len + i) % n];
        }
        let (obj, grads) = unit_objective_grad(&work, ctx, &shard)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                unit: problem.unit,
                step,
            });
        }
        for ((d, c), &p) in dists.iter_mut().zip(&problem.candidates).zip(&problem.qpos) {
            let gw = grads.weight(p).expect("quantizable layer has a weight gradient");
            logit_step(&mut d.logits, &c.values, gw, t, lr);
        }
    }
    let final_t = if cfg.steps == 0 { cfg.t_start } else { cfg.t_end };
    for d in &mut dists {
        d.temperature = final_t;
    }
    let mut assignment: Vec<Vec<u8>> = dists
        .iter()
        .zip(&problem.candidates)
        .map(|(d, c)| d.assignment(c))
        .collect();
    let mut obj_after = problem.objective(&assignment)?;
    if !obj_after.is_finite() {
        return Err(Error::NonFinite {
            unit: problem.unit,
            step: cfg.steps,
        });
    }
    let reverted = obj_after > obj_before;
    if reverted {
        assignment = start;
        obj_after = obj_before;
    }
    let changed = assignment.iter().flatten().filter(|&&a| a != 1).count();
    Ok(UnitOutcome {
        assignment,
        obj_before,
        obj_after,
        steps: cfg.steps,
        final_temperature: final_t,
        min_max_prob: dists
            .iter()
            .zip(&problem.candidates)
            .map(|(d, c)| d.min_max_prob(c))
            .fold(1.0, f32::min),
        undecided: dists
            .iter()
            .zip(&problem.candidates)
            .map(|(d, c)| d.undecided(c, DECIDED))
            .sum(),
        changed,
        reverted,
    })
}

/// `dL/da_k = dL/dW_e · P_k (V_k − W_e) / t`, applied as a plain SGD step.
fn logit_step(logits: &mut [[f32; 3]], values: &[[f32; 3]], gw: &[f32], t: f32, lr: f64) {
    for ((a, v), &g) in logits.iter_mut().zip(values).zip(gw) {
        let p = softmax3(a, t);
        let we: f64 = (0..3).map(|k| v[k] as f64 * p[k] as f64).sum();
        for k in 0..3 {
            let ga = g as f64 * p[k] as f64 * (v[k] as f64 - we) / t as f64;
            a[k] -= (lr * ga) as f32;
        }
    }
}

/// Gradient of the relaxed objective with respect to every logit, for
/// verification against finite differences.
pub fn relaxed_objective_and_logit_grad(
    problem: &UnitProblem<'_>,
    logits: &[Vec<[f32; 3]>],
    t: f32,
    samples: &[usize],
) -> Result<(f64, Vec<Vec<[f64; 3]>>)> {
    let values: Vec<Vec<f32>> = logits
        .iter()
        .zip(&problem.candidates)
        .map(|(a, c)| {
            CandidateDistribution {
                logits: a.clone(),
                temperature: t,
            }
            .expected_values(c)
        })
        .collect();
    let layers = problem.layers_for_values(&values);
    let (obj, grads) = unit_objective_grad(&layers, problem.context, samples)?;
    let out = logits
        .iter()
        .zip(&problem.candidates)
        .zip(&problem.qpos)
        .map(|((a, c), &p)| {
            let gw = grads.weight(p).expect("quantizable");
            a.iter()
                .zip(&c.values)
                .zip(gw)
                .map(|((a, v), &g)| {
                    let pr = softmax3(a, t);
                    let we: f64 = (0..3).map(|k| v[k] as f64 * pr[k] as f64).sum();
                    [0, 1, 2].map(|k| g as f64 * pr[k] as f64 * (v[k] as f64 - we) / t as f64)
                })
                .collect()
        })
        .collect();
    Ok((obj, out))
}

/// Relaxed objective for given logits (no gradient).
pub fn relaxed_objective(problem: &UnitProblem<'_>, logits: &[Vec<[f32; 3]>], t: f32, samples: &[usize]) -> Result<f64> {
    let values: Vec<Vec<f32>> = logits
        .iter()
        .zip(&problem.candidates)
        .map(|(a, c)| {
            CandidateDistribution {
                logits: a.clone(),
                temperature: t,
            }
            .expected_values(c)
        })
        .collect();
    unit_objective(&problem.layers_for_values(&values), problem.context, samples)
}
