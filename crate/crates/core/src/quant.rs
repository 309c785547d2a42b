//! Symmetric quantization primitives.
//!
//! Weights use one scale per output channel (axis 0 of the weight tensor),
//! activations one scale per tensor. A `b`-bit code lies in
//! `[-2^(b-1), 2^(b-1) - 1]` and dequantizes to `scale * code`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of clipping fractions tried by [`weight_scale_search`].
pub const SCALE_GRID_POINTS: usize = 100;

/// Lower bound applied to learned activation scales.
pub const MIN_ACT_SCALE: f32 = 1e-6;

pub fn code_min(bits: u8) -> i32 {
    -(1i32 << (bits - 1))
}

pub fn code_max(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: i64) -> Result<u8> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Parameter(format!("weight bit-width must be in 2..=8, got {bits}")));
    }
    Ok(bits as u8)
}

/// Bit-width and per-channel scales of a quantized weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scales: Vec<f32>,
}

impl QuantParams {
    pub fn new(bits: i64, scales: Vec<f32>) -> Result<Self> {
        let bits = check_bits(bits)?;
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("scales must be positive and finite, got {s}")));
        }
        Ok(Self { bits, scales })
    }

    pub fn code_min(&self) -> i32 {
        code_min(self.bits)
    }

    pub fn code_max(&self) -> i32 {
        code_max(self.bits)
    }

    pub fn clamp_code(&self, c: i32) -> i32 {
        c.clamp(self.code_min(), self.code_max())
    }
}

fn channel_rows(w: &Tensor) -> (usize, usize) {
    (w.shape()[0], w.row_len())
}

fn quant_error(ws: &[f32], alpha: f32, qmin: i32, qmax: i32) -> f64 {
    ws.iter()
        .map(|&w| {
            let q = ((w / alpha).round() as i32).clamp(qmin, qmax);
            let d = w as f64 - (alpha * q as f32) as f64;
            d * d
        })
        .sum()
}

/// Per-channel MSE-optimal scale over a grid of clipping fractions
/// `c ∈ {0.01, …, 1.00}` of the channel's max magnitude.
///
/// Ties go to the larger scale; an all-zero channel gets scale 1.
pub fn weight_scale_search(w: &Tensor, bits: i64) -> Result<QuantParams> {
    let bits = check_bits(bits)?;
    let (qmin, qmax) = (code_min(bits), code_max(bits));
    let (chans, per) = channel_rows(w);
    let scales = (0..chans)
        .map(|c| {
            let ws = &w.data()[c * per..][..per];
            let maxabs = ws.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
            if maxabs == 0.0 {
                return 1.0;
            }
            let mut best = (f64::INFINITY, 1.0f32);
            for i in 1..=SCALE_GRID_POINTS {
                let frac = i as f64 / SCALE_GRID_POINTS as f64;
                let alpha = (frac * maxabs as f64 / qmax as f64) as f32;
                if !(alpha > 0.0) {
                    continue;
                }
                let err = quant_error(ws, alpha, qmin, qmax);
                if err <= best.0 {
                    best = (err, alpha);
                }
            }
            best.1
        })
        .collect();
    QuantParams::new(bits as i64, scales)
}

/// Integer codes plus their dequantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub codes: Vec<i8>,
    pub dequant: Tensor,
}

/// Round-to-nearest quantization on the per-channel grid.
pub fn quantize_rtn(w: &Tensor, params: &QuantParams) -> Result<QuantizedWeights> {
    let (chans, per) = channel_rows(w);
    if params.scales.len() != chans {
        return Err(crate::error::dim_err(
            "quantize_rtn",
            format!("{} scales for {chans} output channels (axis 0)", params.scales.len()),
        ));
    }
    let mut codes = Vec::with_capacity(w.len());
    let mut deq = Vec::with_capacity(w.len());
    for (c, &alpha) in params.scales.iter().enumerate() {
        for &v in &w.data()[c * per..][..per] {
            let q = params.clamp_code((v / alpha).round() as i32);
            codes.push(q as i8);
            deq.push(alpha * q as f32);
        }
    }
    Ok(QuantizedWeights {
        codes,
        dequant: Tensor::new(w.shape().to_vec(), deq)?,
    })
}

/// Dequantizes codes with per-channel scales (channel = axis 0).
pub fn dequantize(codes: &[i8], params: &QuantParams, shape: &[usize]) -> Result<Tensor> {
    let chans = shape[0];
    let per = codes.len() / chans.max(1);
    if params.scales.len() != chans || per * chans != codes.len() {
        return Err(crate::error::dim_err(
            "dequantize",
            format!("{} codes, {} scales, shape {shape:?}", codes.len(), params.scales.len()),
        ));
    }
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &q)| params.scales[i / per] * q as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Three candidate codes per weight: one grid step below, the current code,
/// one step above, clamped into the code range (duplicates kept).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub codes: Vec<[i8; 3]>,
    pub values: Vec<[f32; 3]>,
    /// Per-element channel scale.
    pub scales: Vec<f32>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Codes selected by one candidate index per weight.
    pub fn select(&self, assignment: &[u8]) -> Vec<i8> {
        self.codes.iter().zip(assignment).map(|(c, &a)| c[a as usize]).collect()
    }

    pub fn select_values(&self, assignment: &[u8]) -> Vec<f32> {
        self.values.iter().zip(assignment).map(|(v, &a)| v[a as usize]).collect()
    }
}

pub fn build_candidates(codes: &[i8], params: &QuantParams) -> Result<CandidateSet> {
    let chans = params.scales.len();
    if chans == 0 || codes.len() % chans != 0 {
        return Err(crate::error::dim_err(
            "build_candidates",
            format!("{} codes not divisible into {chans} channels", codes.len()),
        ));
    }
    let per = codes.len() / chans;
    let mut out = CandidateSet {
        codes: Vec::with_capacity(codes.len()),
        values: Vec::with_capacity(codes.len()),
        scales: Vec::with_capacity(codes.len()),
    };
    for (i, &q) in codes.iter().enumerate() {
        let alpha = params.scales[i / per];
        let q = q as i32;
        let cs = [params.clamp_code(q - 1), params.clamp_code(q), params.clamp_code(q + 1)];
        out.codes.push(cs.map(|c| c as i8));
        out.values.push(cs.map(|c| alpha * c as f32));
        out.scales.push(alpha);
    }
    Ok(out)
}

/// Symmetric per-tensor fake quantization of activations.
pub fn fake_quant_act(x: &Tensor, scale: f32, bits: u8) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("activation scale must be > 0, got {scale}")));
    }
    let (qmin, qmax) = (code_min(bits), code_max(bits));
    let data = x
        .data()
        .iter()
        .map(|&v| scale * ((v / scale).round() as i32).clamp(qmin, qmax) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Clipped-threshold gradient of [`fake_quant_act`]: identity inside the clip
/// range, zero outside; the scale receives `sign(x)` from clipped elements
/// and nothing from unclipped ones.
pub fn fake_quant_act_backward(x: &Tensor, scale: f32, bits: u8, grad_out: &Tensor) -> (Tensor, f32) {
    let (lo, hi) = (code_min(bits) as f32, code_max(bits) as f32);
    let mut gscale = 0.0f64;
    let gx = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let r = v / scale;
            if r > hi || r < lo {
                gscale += g as f64 * v.signum() as f64;
                0.0
            } else {
                g
            }
        })
        .collect();
    (Tensor::new(x.shape().to_vec(), gx).expect("shape preserved"), gscale as f32)
}

/// Scale whose clip threshold sits at the given quantile of `|x|`.
pub fn percentile_scale(values: &[f32], quantile: f64, bits: u8) -> f32 {
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(f32::total_cmp);
    let idx = ((mags.len() - 1) as f64 * quantile).round() as usize;
    let clip = mags[idx.min(mags.len() - 1)];
    (clip / code_max(bits) as f32).max(MIN_ACT_SCALE)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn chan(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn grid_weights_are_exactly_representable() {
        let w = chan(&[-0.5, 0.0, 0.5]);
        let p = weight_scale_search(&w, 3).unwrap();
        let q = quantize_rtn(&w, &p).unwrap();
        for (a, b) in q.dequant.data().iter().zip(w.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn single_weight_two_bits() {
        let w = chan(&[1.0]);
        let p = weight_scale_search(&w, 2).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        let q = quantize_rtn(&w, &p).unwrap();
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.dequant.data(), &[1.0]);
    }

    #[test]
    fn two_weight_channel_close_to_fine_scan() {
        // independent 10,000-point scan in f64
        let ws = [0.1f64, 0.9];
        let mse = |alpha: f64| -> f64 {
            ws.iter()
                .map(|&w| {
                    let q = (w / alpha).round().clamp(-2.0, 1.0);
                    (w - alpha * q).powi(2)
                })
                .sum::<f64>()
                / 2.0
        };
        let fine = (1..=10_000).map(|i| mse(i as f64 / 10_000.0 * 0.9)).fold(f64::INFINITY, f64::min);
        let w = chan(&[0.1, 0.9]);
        let p = weight_scale_search(&w, 2).unwrap();
        let got = mse(p.scales[0] as f64);
        assert!(got <= fine * 1.01 + 1e-12, "grid {got} vs fine {fine}");
    }

    #[test]
    fn zero_channel_gets_unit_scale_and_bad_bits_rejected() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.3, -0.2]).unwrap();
        let p = weight_scale_search(&w, 4).unwrap();
        assert_eq!(p.scales[0], 1.0);
        assert!(weight_scale_search(&w, -1).is_err());
        assert!(weight_scale_search(&w, 9).is_err());
    }

    #[test]
    fn rtn_examples() {
        let p = QuantParams::new(3, vec![0.5]).unwrap();
        let q = quantize_rtn(&chan(&[0.4, -0.6]), &p).unwrap();
        assert_eq!(q.codes, vec![1, -1]);
        assert_eq!(q.dequant.data(), &[0.5, -0.5]);
        let q = quantize_rtn(&chan(&[0.0]), &p).unwrap();
        assert_eq!((q.codes[0], q.dequant.data()[0]), (0, 0.0));
        let q = quantize_rtn(&chan(&[10.0]), &p).unwrap();
        assert_eq!((q.codes[0], q.dequant.data()[0]), (3, 1.5));
    }

    #[test]
    fn candidate_examples() {
        let p = QuantParams::new(3, vec![0.5]).unwrap();
        let c = build_candidates(&[1, 3, 0], &p).unwrap();
        assert_eq!(c.values[0], [0.0, 0.5, 1.0]);
        assert_eq!(c.values[1], [1.0, 1.5, 1.5]);
        assert_eq!(c.values[2], [-0.5, 0.0, 0.5]);
        assert_eq!(c.codes[1], [2, 3, 3]);
    }

    #[test]
    fn fake_quant_examples() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 0.0]);
        assert_eq!(fake_quant_act(&x, 0.25, 8).unwrap().data(), x.data());
        assert_eq!(fake_quant_act(&Tensor::from_vec(vec![0.3]), 0.25, 8).unwrap().data(), &[0.25]);
        assert_eq!(fake_quant_act(&Tensor::from_vec(vec![100.0]), 0.25, 8).unwrap().data(), &[31.75]);
        assert!(fake_quant_act(&x, 0.0, 8).is_err());
    }

    #[test]
    fn fake_quant_gradient_contract() {
        let x = Tensor::from_vec(vec![0.3, 100.0, -100.0]);
        let g = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let (gx, gs) = fake_quant_act_backward(&x, 0.25, 8, &g);
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(gs, 2.0 - 3.0);
    }

    #[test]
    fn percentile_scale_clips_outlier() {
        let mut v = vec![1.0f32; 2000];
        v[7] = 1000.0;
        let s = percentile_scale(&v, 0.999, 8);
        assert_abs_diff_eq!(s, 1.0 / 127.0);
    }

    proptest! {
        #[test]
        fn rtn_codes_on_grid_and_nearest(ws in prop::collection::vec(-2.0f32..2.0, 1..40), bits in 2i64..=8) {
            let w = chan(&ws);
            let p = weight_scale_search(&w, bits).unwrap();
            let q = quantize_rtn(&w, &p).unwrap();
            let alpha = p.scales[0];
            for ((&c, &d), &v) in q.codes.iter().zip(q.dequant.data()).zip(&ws) {
                let c = c as i32;
                prop_assert!(c >= p.code_min() && c <= p.code_max());
                prop_assert_eq!(d, alpha * c as f32);
                let r = v / alpha;
                if r >= p.code_min() as f32 && r <= p.code_max() as f32 {
                    prop_assert!((d - v).abs() <= alpha / 2.0 * (1.0 + 1e-5));
                    for g in p.code_min()..=p.code_max() {
                        prop_assert!((d - v).abs() <= (alpha * g as f32 - v).abs() + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn candidates_ordered_one_step(code in -4i8..=3, alpha in 0.01f32..2.0) {
            let p = QuantParams::new(3, vec![alpha]).unwrap();
            let c = build_candidates(&[code], &p).unwrap();
            let v = c.values[0];
            prop_assert!(v[0] <= v[1] && v[1] <= v[2]);
            prop_assert_eq!(v[1], alpha * code as f32);
            if code > -4 { prop_assert_eq!(c.codes[0][0], code - 1); }
            if code < 3 { prop_assert_eq!(c.codes[0][2], code + 1); }
        }
    }
}
