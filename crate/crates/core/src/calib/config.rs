use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a unit's input activations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Outputs of the already-quantized preceding network.
    Quantized,
    /// Outputs of the float reference network.
    Float,
}

/// Labels used for the squared-gradient (Fisher) weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherSource {
    /// Ground-truth labels of the calibration samples.
    Labels,
    /// The float model's own argmax predictions.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub weight_bits: u8,
    /// Bit-width of the first and last quantizable layers.
    pub edge_bits: u8,
    /// 32 disables activation quantization.
    pub act_bits: u8,
    pub unit_size: usize,
    pub steps: usize,
    pub lr_logits: f32,
    /// Step on `objective / objective(start)` so `lr_logits` does not depend
    /// on the unit's error magnitude.
    pub relative_objective: bool,
    pub lr_act: f32,
    pub pact_steps: usize,
    pub t_start: f32,
    pub t_end: f32,
    /// Initial logit of the round-to-nearest candidate (neighbours start at 0).
    pub logit_init: f32,
    pub shard_size: usize,
    pub seed: u64,
    pub input_mode: InputMode,
    pub fisher_source: FisherSource,
    /// Quantile of |activation| used to initialise activation scales.
    pub act_init_quantile: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            edge_bits: 8,
            act_bits: 32,
            unit_size: 3,
            steps: 2000,
            lr_logits: 1.0,
            relative_objective: true,
            lr_act: 1e-4,
            pact_steps: 200,
            t_start: 1.0,
            t_end: 0.01,
            logit_init: 0.5,
            shard_size: 32,
            seed: 0,
            input_mode: InputMode::Quantized,
            fisher_source: FisherSource::Labels,
            act_init_quantile: 0.999,
        }
    }
}

impl CalibConfig {
    pub fn act_quant_enabled(&self) -> bool {
        self.act_bits < 32
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.weight_bits) || !(2..=8).contains(&self.edge_bits) {
            return Err(Error::Parameter(format!(
                "weight bit-widths must be in 2..=8 (got {} / {})",
                self.weight_bits, self.edge_bits
            )));
        }
        if !(2..=8).contains(&self.act_bits) && self.act_bits != 32 {
            return Err(Error::Parameter(format!("activation bits must be in 2..=8 or 32, got {}", self.act_bits)));
        }
        if self.unit_size == 0 {
            return Err(Error::Parameter("unit size must be >= 1".into()));
        }
        if !(self.t_end > 0.0 && self.t_start >= self.t_end) {
            return Err(Error::Parameter(format!(
                "temperature schedule needs t_start >= t_end > 0 (got {} -> {})",
                self.t_start, self.t_end
            )));
        }
        if self.shard_size == 0 {
            return Err(Error::Parameter("shard size must be >= 1".into()));
        }
        if !(self.lr_logits >= 0.0) || !(self.lr_act >= 0.0) {
            return Err(Error::Parameter("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}
