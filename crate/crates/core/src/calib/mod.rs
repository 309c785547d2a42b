//! Post-training calibration: round-to-nearest, layer-wise and unit-wise
//! candidate search, and activation-scale learning.

mod config;
pub mod objective;
pub mod optimize;
pub mod pact;
mod pipeline;
pub mod relax;

pub use config::{CalibConfig, FisherSource, InputMode};
pub use objective::{fisher_weights, tap_cache, unit_objective, unit_objective_full, UnitContext};
pub use optimize::{optimize_unit, UnitOutcome, UnitProblem};
pub use pact::{pact_learn_scales, PactOutcome};
pub use pipeline::{
    calibrate, calibrate_layerwise, calibrate_unitwise, insert_act_quant, quantize_rtn_graph, quantize_weights_rtn,
    CalibData, CalibReport, Method, UnitReport,
};
pub use relax::{anneal, expected_weight, softmax_temp, CandidateDistribution};
