//! Continuous relaxation of the per-weight candidate choice.

use crate::error::{Error, Result};
use crate::quant::CandidateSet;

/// `P_i = exp(a_i/t) / Σ_j exp(a_j/t)`, evaluated with the maximum subtracted.
pub fn softmax_temp(a: &[f32], t: f32) -> Result<Vec<f32>> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {t}")));
    }
    let mx = a.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let e: Vec<f64> = a.iter().map(|&v| ((v as f64 - mx) / t as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| (v / s) as f32).collect())
}

#[inline]
pub(crate) fn softmax3(a: &[f32; 3], t: f32) -> [f32; 3] {
    let mx = a[0].max(a[1]).max(a[2]) as f64;
    let inv = 1.0 / t as f64;
    let e = a.map(|v| ((v as f64 - mx) * inv).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| (v / s) as f32)
}

/// `Σ_i V_i P_i`.
pub fn expected_weight(values: &[f32; 3], p: &[f32; 3]) -> f32 {
    values
        .iter()
        .zip(p)
        .map(|(&v, &q)| v as f64 * q as f64)
        .sum::<f64>() as f32
}

/// Exponential temperature schedule from `t_start` (step 0) to `t_end`
/// (step `steps − 1`).
pub fn anneal(step: usize, steps: usize, t_start: f32, t_end: f32) -> f32 {
    if steps <= 1 {
        return t_start;
    }
    let frac = step.min(steps - 1) as f64 / (steps - 1) as f64;
    (t_start as f64 * (t_end as f64 / t_start as f64).powf(frac)) as f32
}

/// Index of the largest probability; ties involving the middle (round-to-nearest)
/// candidate resolve to it, other ties to the lower index.
pub fn argmax_middle_tie(p: &[f32; 3]) -> u8 {
    let mx = p[0].max(p[1]).max(p[2]);
    if p[1] == mx {
        1
    } else if p[0] == mx {
        0
    } else {
        2
    }
}

/// Per-weight logits over the three candidates of each weight.
#[derive(Debug, Clone)]
pub struct CandidateDistribution {
    pub logits: Vec<[f32; 3]>,
    pub temperature: f32,
}

impl CandidateDistribution {
    /// Middle candidate at `bias`, neighbours at 0.
    pub fn biased(n: usize, bias: f32, temperature: f32) -> Self {
        Self {
            logits: vec![[0.0, bias, 0.0]; n],
            temperature,
        }
    }

    pub fn probs(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        let t = self.temperature;
        self.logits.iter().map(move |a| softmax3(a, t))
    }

    pub fn expected_values(&self, cands: &CandidateSet) -> Vec<f32> {
        self.probs()
            .zip(&cands.values)
            .map(|(p, v)| expected_weight(v, &p))
            .collect()
    }

    /// Argmax per weight, with candidates that share a code pooled.
    pub fn assignment(&self, cands: &CandidateSet) -> Vec<u8> {
        self.probs()
            .zip(&cands.codes)
            .map(|(p, c)| argmax_middle_tie(&pool_duplicates(&p, c)))
            .collect()
    }

    /// Smallest winning probability across weights, duplicates pooled.
    pub fn min_max_prob(&self, cands: &CandidateSet) -> f32 {
        self.probs()
            .zip(&cands.codes)
            .map(|(p, c)| {
                let q = pool_duplicates(&p, c);
                q[0].max(q[1]).max(q[2])
            })
            .fold(1.0, f32::min)
    }

    /// Weights whose pooled winning probability is below `threshold`.
    pub fn undecided(&self, cands: &CandidateSet, threshold: f32) -> usize {
        self.probs()
            .zip(&cands.codes)
            .filter(|(p, c)| {
                let q = pool_duplicates(p, c);
                q[0].max(q[1]).max(q[2]) < threshold
            })
            .count()
    }
}

/// Each entry becomes the total probability of its code.
pub(crate) fn pool_duplicates(p: &[f32; 3], codes: &[i8; 3]) -> [f32; 3] {
    [0, 1, 2].map(|k| (0..3).filter(|&j| codes[j] == codes[k]).map(|j| p[j]).sum())
}
