//! Command implementations behind the `unitquant` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, quantize_rtn_graph, CalibConfig, CalibData, CalibReport, FisherSource, InputMode, Method};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{fold_batchnorm, load_model, save_model, ModelGraph};
use crate::tensor::Batch;
use crate::oracle::net64::{self, T64};
use crate::oracle::{full_hessian, hessian_blocks, taylor_curve, tridiagonal_mass, LossNet, MassRow, TaylorPoint};
use crate::quant::{quantize_rtn, weight_scale_search};
use crate::train::{evaluate, mlp, reference_cnn, train, Accuracy, EpochLog, TrainConfig};

pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub dataset: Dataset,
    pub output: PathBuf,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config: TrainRun,
    pub epochs: Vec<EpochLog>,
    pub test_accuracy: Accuracy,
    pub seconds: f64,
}

/// Trains the reference CNN on the training split and saves it.
pub fn cmd_train(run: &TrainRun) -> Result<TrainSummary> {
    let t0 = Instant::now();
    let train_set = run.dataset.load(Split::Train)?;
    let test_set = run.dataset.load(Split::Test)?;
    let shape = train_set.inputs.shape()[1..].to_vec();
    let mut graph = reference_cnn(&shape, run.dataset.classes, run.train.seed)?;
    let epochs = train(&mut graph, &train_set, &run.train)?;
    for e in &epochs {
        log::info!("epoch {:>3}: loss {:.4}, train top-1 {:.4}", e.epoch, e.mean_loss, e.train_top1);
    }
    let test_accuracy = evaluate(&graph, &test_set, TOP_K.min(run.dataset.classes))?;
    save_model(&graph, &run.output)?;
    Ok(TrainSummary {
        config: run.clone(),
        epochs,
        test_accuracy,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Everything a quantization run depends on; embedded in its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeRun {
    pub dataset: Dataset,
    pub model: PathBuf,
    pub output: PathBuf,
    pub method: Method,
    pub calib_size: usize,
    pub calib: CalibConfig,
}

impl QuantizeRun {
    pub fn validate(&self) -> Result<()> {
        if self.calib_size == 0 {
            return Err(Error::Parameter("calibration size must be >= 1".into()));
        }
        if ![2, 3, 4, 8].contains(&self.calib.weight_bits) {
            return Err(Error::Parameter(format!(
                "weight bits must be one of 2, 3, 4, 8 (got {})",
                self.calib.weight_bits
            )));
        }
        if ![4, 8, 32].contains(&self.calib.act_bits) {
            return Err(Error::Parameter(format!(
                "activation bits must be one of 4, 8, 32 (got {})",
                self.calib.act_bits
            )));
        }
        self.calib.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopAccuracy {
    pub top1: f64,
    pub top5: f64,
}

impl From<Accuracy> for TopAccuracy {
    fn from(a: Accuracy) -> Self {
        Self {
            top1: a.top1,
            top5: a.topk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub index: usize,
    pub layers: Vec<usize>,
    pub obj_before: f64,
    pub obj_after: f64,
    pub seconds: f64,
    pub steps: usize,
    pub final_temperature: f32,
    pub min_max_prob: f32,
    #[serde(default)]
    pub undecided: usize,
    pub changed_weights: usize,
    pub reverted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_scales: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub method: Method,
    pub unit_size: usize,
    pub input_mode: InputMode,
    pub fisher_source: Option<FisherSource>,
    pub act_quant: bool,
    pub calib_split: Split,
    pub eval_split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub config: QuantizeRun,
    pub fp_accuracy: TopAccuracy,
    pub rtn_accuracy: TopAccuracy,
    pub calibrated_accuracy: TopAccuracy,
    pub per_unit: Vec<UnitSummary>,
    pub mode_flags: ModeFlags,
    pub total_seconds: f64,
}

/// `n` training samples drawn without replacement under `seed`.
pub fn draw_calibration(train_set: &Batch, n: usize, seed: u64) -> Result<Batch> {
    if n == 0 || n > train_set.len() {
        return Err(Error::Parameter(format!(
            "calibration size {n} must be in 1..={}",
            train_set.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xca11));
    idx.truncate(n);
    Ok(train_set.select(&idx))
}

fn summarize(report: &CalibReport) -> Vec<UnitSummary> {
    report
        .units
        .iter()
        .map(|u| UnitSummary {
            index: u.index,
            layers: u.layers.clone(),
            obj_before: u.obj_before,
            obj_after: u.obj_after,
            seconds: u.seconds,
            steps: u.steps,
            final_temperature: u.final_temperature,
            min_max_prob: u.min_max_prob,
            undecided: u.undecided,
            changed_weights: u.changed_weights,
            reverted: u.reverted,
            act_scales: u.act_scales.clone(),
        })
        .collect()
}

/// Folds, quantizes with the configured method, evaluates, and writes the
/// quantized model. The caller decides where the report goes.
pub fn cmd_quantize(run: &QuantizeRun) -> Result<(ModelGraph, QuantizeReport)> {
    let t0 = Instant::now();
    run.validate()?;
    let float = load_model(&run.model)?;
    let folded = fold_batchnorm(&float)?;
    let train_set = run.dataset.load(Split::Train)?;
    let test_set = run.dataset.load(Split::Test)?;
    if test_set.labels.iter().any(|&l| l >= float.classes) {
        return Err(Error::Data(format!("test labels exceed the model's {} classes", float.classes)));
    }
    let calib_set = draw_calibration(&train_set, run.calib_size, run.calib.seed)?;
    let data = CalibData {
        inputs: &calib_set.inputs,
        labels: Some(&calib_set.labels),
    };
    let k = TOP_K.min(float.classes);
    let fp = evaluate(&folded, &test_set, k)?;
    let rtn = quantize_rtn_graph(&folded, data, &run.calib)?;
    let rtn_acc = evaluate(&rtn, &test_set, k)?;
    let (quantized, report) = calibrate(&folded, data, &run.calib, run.method)?;
    let cal_acc = evaluate(&quantized, &test_set, k)?;
    save_model(&quantized, &run.output)?;
    let out = QuantizeReport {
        config: run.clone(),
        fp_accuracy: fp.into(),
        rtn_accuracy: rtn_acc.into(),
        calibrated_accuracy: cal_acc.into(),
        per_unit: summarize(&report),
        mode_flags: ModeFlags {
            method: report.method,
            unit_size: report.unit_size,
            input_mode: report.input_mode,
            fisher_source: report.fisher_source,
            act_quant: report.act_quant,
            calib_split: Split::Train,
            eval_split: Split::Test,
        },
        total_seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((quantized, out))
}

pub fn cmd_eval(model: &Path, dataset: &Dataset, split: Split) -> Result<Accuracy> {
    let g = load_model(model)?;
    if g.classes != dataset.classes {
        return Err(Error::Data(format!(
            "model has {} classes but the dataset declares {}",
            g.classes, dataset.classes
        )));
    }
    let data = dataset.load(split)?;
    evaluate(&g, &data, TOP_K.min(g.classes))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockAsymmetry {
    pub i: usize,
    pub j: usize,
    pub relative: f64,
}

/// Hessian structure of a small trained MLP.
#[derive(Debug, Clone, Serialize)]
pub struct HessianProbe {
    pub hidden: Vec<usize>,
    pub samples: usize,
    pub train_top1: f64,
    pub min_kink_margin: f64,
    pub params_per_layer: Vec<usize>,
    pub asymmetry: Vec<BlockAsymmetry>,
    pub max_asymmetry: f64,
    pub mass: Vec<MassRow>,
    /// Perturbation: 4-bit round-to-nearest weights minus float weights.
    pub taylor: Vec<TaylorPoint>,
    /// `error(s/2) / error(s)` for consecutive scales.
    pub remainder_ratios: Vec<f64>,
}

impl HessianProbe {
    pub fn mass_csv(&self) -> String {
        let mut s = String::from("distance,blocks,mean_frobenius\n");
        for r in &self.mass {
            s += &format!("{},{},{:e}\n", r.distance, r.blocks, r.mean_frobenius);
        }
        s
    }

    pub fn taylor_csv(&self) -> String {
        let mut s = String::from("scale,actual,predicted,abs_error\n");
        for p in &self.taylor {
            s += &format!("{},{:e},{:e},{:e}\n", p.scale, p.actual, p.predicted, p.abs_error);
        }
        s
    }

    pub fn mass_table(&self) -> String {
        let mut s = String::from("|i-j|  blocks  mean ||H_ij||_F\n");
        for r in &self.mass {
            s += &format!("{:>5}  {:>6}  {:.6e}\n", r.distance, r.blocks, r.mean_frobenius);
        }
        s += &format!("max block asymmetry {:.3e}\n", self.max_asymmetry);
        for p in &self.taylor {
            s += &format!(
                "taylor s={:<7} actual {:+.6e} predicted {:+.6e} error {:.3e}\n",
                p.scale, p.actual, p.predicted, p.abs_error
            );
        }
        s
    }
}

pub const PROBE_HIDDEN: [usize; 2] = [8, 8];
pub const PROBE_SCALES: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Trains a 3-layer, 8-wide MLP, then measures its full finite-difference
/// Hessian on the `samples` training inputs farthest from any relu kink.
pub fn probe_hessian(train_set: &Batch, classes: usize, seed: u64, samples: usize) -> Result<HessianProbe> {
    if samples == 0 || samples > train_set.len() {
        return Err(Error::Parameter(format!("probe samples must be in 1..={}", train_set.len())));
    }
    let shape = train_set.inputs.shape()[1..].to_vec();
    let mut g = mlp(&shape, &PROBE_HIDDEN, classes, seed)?;
    let cfg = TrainConfig {
        epochs: 60,
        lr: 0.05,
        weight_decay: 0.0,
        seed,
        ..TrainConfig::default()
    };
    train(&mut g, train_set, &cfg)?;
    let train_top1 = evaluate(&g, train_set, 1)?.top1;
    let l64 = net64::convert(&g.layers, false)?;
    let margins = net64::sample_margins(&l64, &T64::from_f32(&train_set.inputs));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
    order.truncate(samples);
    order.sort_unstable();
    let sub = train_set.select(&order);
    let min_kink_margin = order.iter().map(|&i| margins[i]).fold(f64::INFINITY, f64::min);
    let net = LossNet::from_f32(&g.layers, &sub.inputs, &sub.labels)?;
    let blocks = hessian_blocks(&net)?;
    let asymmetry: Vec<BlockAsymmetry> = blocks
        .asymmetry()
        .into_iter()
        .map(|((i, j), relative)| BlockAsymmetry { i, j, relative })
        .collect();
    let max_asymmetry = asymmetry.iter().map(|a| a.relative).fold(0.0, f64::max);
    let mass = tridiagonal_mass(&blocks)?;
    let h = full_hessian(&blocks)?;
    let mut dw = Vec::new();
    for i in g.quantizable_indices() {
        let w = g.layers[i].weight().expect("linear");
        let p = weight_scale_search(w, 4)?;
        let q = quantize_rtn(w, &p)?;
        dw.extend(q.dequant.data().iter().zip(w.data()).map(|(a, b)| *a as f64 - *b as f64));
    }
    let taylor = taylor_curve(&net, &h, &dw, &PROBE_SCALES)?;
    let remainder_ratios = taylor.windows(2).map(|w| w[1].abs_error / w[0].abs_error).collect();
    Ok(HessianProbe {
        hidden: PROBE_HIDDEN.to_vec(),
        samples,
        train_top1,
        min_kink_margin,
        params_per_layer: blocks.sizes.clone(),
        asymmetry,
        max_asymmetry,
        mass,
        taylor,
        remainder_ratios,
    })
}

pub fn cmd_probe_hessian(dataset: &Dataset, seed: u64, samples: usize) -> Result<HessianProbe> {
    let train_set = dataset.load(Split::Train)?;
    probe_hessian(&train_set, dataset.classes, seed, samples)
}
