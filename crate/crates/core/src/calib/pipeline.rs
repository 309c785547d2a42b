use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::objective::{tap_cache, UnitContext};
use super::optimize::{optimize_unit, UnitProblem};
use super::pact::{init_act_scales, pact_learn_scales};
use super::{CalibConfig, FisherSource, InputMode};
use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::model::{partition_units, ActQuant, Layer, ModelGraph, WeightQuant};
use crate::quant::{build_candidates, percentile_scale, quantize_rtn, weight_scale_search};
use crate::tensor::Tensor;
use crate::train::predictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    Layerwise,
    Unitwise,
}

/// Calibration samples; labels drive the Fisher weights when present.
#[derive(Debug, Clone, Copy)]
pub struct CalibData<'a> {
    pub inputs: &'a Tensor,
    pub labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitReport {
    pub index: usize,
    /// Graph indices of the unit's conv/linear layers in the quantized graph.
    pub layers: Vec<usize>,
    pub obj_before: f64,
    pub obj_after: f64,
    pub steps: usize,
    pub final_temperature: f32,
    pub min_max_prob: f32,
    pub undecided: usize,
    pub changed_weights: usize,
    pub reverted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_scales: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_obj_after: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibReport {
    pub method: Method,
    pub unit_size: usize,
    pub input_mode: InputMode,
    /// Fisher label source actually used; absent for round-to-nearest.
    pub fisher_source: Option<FisherSource>,
    pub act_quant: bool,
    pub calib_samples: usize,
    pub units: Vec<UnitReport>,
    pub total_seconds: f64,
}

fn reject_quantized(graph: &ModelGraph) -> Result<()> {
    if graph.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_))) {
        return Err(Error::Structure("calibration expects a graph with batch-norm folded".into()));
    }
    if graph.layers.iter().any(|l| l.quant().is_some() || matches!(l, Layer::FakeQuant(_))) {
        return Err(Error::Structure("calibration expects a float graph".into()));
    }
    Ok(())
}

/// Round-to-nearest quantization of every conv/linear layer; the first and
/// last use `edge_bits`.
pub fn quantize_weights_rtn(graph: &ModelGraph, cfg: &CalibConfig) -> Result<ModelGraph> {
    let mut out = graph.clone();
    let q = out.quantizable_indices();
    for (ord, &i) in q.iter().enumerate() {
        let bits = if ord == 0 || ord + 1 == q.len() {
            cfg.edge_bits
        } else {
            cfg.weight_bits
        };
        let w = out.layers[i].weight().expect("quantizable");
        let params = weight_scale_search(w, bits as i64)?;
        let qw = quantize_rtn(w, &params)?;
        out.layers[i].set_quant(WeightQuant { params, codes: qw.codes })?;
    }
    Ok(out)
}

/// Adds an activation quantizer at the input and after every relu, each
/// scaled at `quantile` of the absolute float activations on `inputs`.
pub fn insert_act_quant(graph: &ModelGraph, inputs: &Tensor, bits: u8, quantile: f64) -> Result<ModelGraph> {
    let mut layers = Vec::with_capacity(graph.layers.len() * 2);
    let mut cur = inputs.clone();
    let fq = |x: &Tensor| {
        Layer::FakeQuant(ActQuant {
            bits,
            scale: percentile_scale(x.data(), quantile, bits),
        })
    };
    layers.push(fq(&cur));
    for l in &graph.layers {
        cur = autodiff::forward(std::slice::from_ref(l), &cur, Mode::Eval)?;
        layers.push(l.clone());
        if matches!(l, Layer::Relu) {
            layers.push(fq(&cur));
        }
    }
    ModelGraph::new(layers, graph.input_shape.clone(), graph.classes)
}

/// Weights-only (and, when enabled, activation) round-to-nearest baseline.
pub fn quantize_rtn_graph(graph: &ModelGraph, data: CalibData<'_>, cfg: &CalibConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    reject_quantized(graph)?;
    let g = if cfg.act_quant_enabled() {
        insert_act_quant(graph, data.inputs, cfg.act_bits, cfg.act_init_quantile)?
    } else {
        graph.clone()
    };
    quantize_weights_rtn(&g, cfg)
}

fn prefix_output(layers: &[Layer], upto: usize, inputs: &Tensor) -> Result<Tensor> {
    let mut parts = Vec::new();
    let n = inputs.batch();
    let mut s = 0;
    while s < n {
        let c = 256.min(n - s);
        parts.push(autodiff::forward(&layers[..=upto], &inputs.rows(s, c), Mode::Eval)?);
        s += c;
    }
    Tensor::concat_rows(&parts)
}

pub fn calibrate_unitwise(graph: &ModelGraph, data: CalibData<'_>, cfg: &CalibConfig) -> Result<(ModelGraph, CalibReport)> {
    calibrate(graph, data, cfg, Method::Unitwise)
}

/// Unit-wise machinery with single-layer units.
pub fn calibrate_layerwise(graph: &ModelGraph, data: CalibData<'_>, cfg: &CalibConfig) -> Result<(ModelGraph, CalibReport)> {
    calibrate(graph, data, cfg, Method::Layerwise)
}

/// Quantizes a folded float graph with the chosen method.
pub fn calibrate(
    graph: &ModelGraph,
    data: CalibData<'_>,
    cfg: &CalibConfig,
    method: Method,
) -> Result<(ModelGraph, CalibReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let n = data.inputs.batch();
    if n == 0 {
        return Err(Error::Data("calibration set is empty".into()));
    }
    let mut q = quantize_rtn_graph(graph, data, cfg)?;
    let unit_size = match method {
        Method::Layerwise => 1,
        _ => cfg.unit_size,
    };
    let mut report = CalibReport {
        method,
        unit_size,
        input_mode: cfg.input_mode,
        fisher_source: None,
        act_quant: cfg.act_quant_enabled(),
        calib_samples: n,
        units: Vec::new(),
        total_seconds: 0.0,
    };
    if method == Method::Rtn {
        report.total_seconds = started.elapsed().as_secs_f64();
        return Ok((q, report));
    }

    let ref_idx = graph.quantizable_indices();
    let q_idx = q.quantizable_indices();
    let owned_labels;
    let labels: &[usize] = match (cfg.fisher_source, data.labels) {
        (FisherSource::Labels, Some(l)) => l,
        (FisherSource::Labels, None) => {
            return Err(Error::Data("fisher source `labels` needs calibration labels".into()))
        }
        (FisherSource::Argmax, _) => {
            owned_labels = predictions(&graph.forward_chunked(data.inputs, 256)?);
            &owned_labels
        }
    };
    report.fisher_source = Some(cfg.fisher_source);
    let units = partition_units(&q, unit_size)?;
    let taps: Vec<usize> = units.iter().map(|u| ref_idx[u.ordinals.end - 1]).collect();
    let cache = tap_cache(graph, data.inputs, labels, &taps)?;
    let mut act_initialised = vec![false; q.layers.len()];

    for (k, unit) in units.iter().enumerate() {
        let t0 = Instant::now();
        let inputs = match (unit.input_ordinal(), cfg.input_mode) {
            (None, _) => data.inputs.clone(),
            (Some(o), InputMode::Quantized) => prefix_output(&q.layers, q_idx[o], data.inputs)?,
            (Some(o), InputMode::Float) => prefix_output(&graph.layers, ref_idx[o], data.inputs)?,
        };
        let mut ctx = UnitContext::new(inputs, cache.targets[k].clone(), cache.fisher[k].clone())?;
        ctx.normalize_fisher();

        let mut span: Vec<Layer> = q.layers[unit.span.clone()].to_vec();
        if cfg.act_quant_enabled() {
            let fresh: Vec<usize> = unit
                .span
                .clone()
                .filter(|&g| matches!(q.layers[g], Layer::FakeQuant(_)) && !act_initialised[g])
                .map(|g| g - unit.span.start)
                .collect();
            init_act_scales(&mut span, &ctx.inputs, cfg.act_init_quantile, &fresh)?;
            for &p in &fresh {
                act_initialised[p + unit.span.start] = true;
            }
        }
        let candidates = unit
            .layers
            .iter()
            .map(|&g| {
                let wq = q.layers[g].quant().expect("all layers start quantized");
                build_candidates(&wq.codes, &wq.params)
            })
            .collect::<Result<Vec<_>>>()?;
        let problem = UnitProblem::new(unit.index, span, candidates, &ctx)?;
        let outcome = optimize_unit(&problem, cfg, cfg.seed.wrapping_add(k as u64))?;
        for ((&g, cands), a) in unit.layers.iter().zip(&problem.candidates).zip(&outcome.assignment) {
            let params = q.layers[g].quant().expect("quantized").params.clone();
            q.layers[g].set_quant(WeightQuant {
                params,
                codes: cands.select(a),
            })?;
        }
        let (mut act_scales, mut act_obj_after) = (None, None);
        if cfg.act_quant_enabled() {
            let mut committed = problem.layers_for_assignment(&outcome.assignment);
            let pact = pact_learn_scales(&mut committed, &ctx, cfg, cfg.seed.wrapping_add(k as u64))?;
            for &(p, s) in &pact.scales {
                if let Layer::FakeQuant(a) = &mut q.layers[unit.span.start + p] {
                    a.scale = s;
                }
            }
            act_scales = Some(pact.scales.iter().map(|&(_, s)| s).collect());
            act_obj_after = Some(pact.obj_after);
        }
        let seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "unit {}/{}: objective {:.6e} -> {:.6e} ({} weights moved{}) in {:.1}s",
            k + 1,
            units.len(),
            outcome.obj_before,
            outcome.obj_after,
            outcome.changed,
            if outcome.reverted { ", reverted" } else { "" },
            seconds
        );
        report.units.push(UnitReport {
            index: unit.index,
            layers: unit.layers.clone(),
            obj_before: outcome.obj_before,
            obj_after: outcome.obj_after,
            steps: outcome.steps,
            final_temperature: outcome.final_temperature,
            min_max_prob: outcome.min_max_prob,
            undecided: outcome.undecided,
            changed_weights: outcome.changed,
            reverted: outcome.reverted,
            act_scales,
            act_obj_after,
            seconds,
        });
    }
    report.total_seconds = started.elapsed().as_secs_f64();
    Ok((q, report))
}
