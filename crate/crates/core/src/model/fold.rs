use super::{Layer, ModelGraph};
use crate::error::{Error, Result};

/// Absorbs every batch-norm into the conv/linear layer right before it:
/// `W' = W·γ/√(σ²+ε)` per output channel, `b' = (b−μ)·γ/√(σ²+ε) + β`.
pub fn fold_batchnorm(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut out: Vec<Layer> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let Layer::BatchNorm(bn) = layer else {
            out.push(layer.clone());
            continue;
        };
        let prev = match out.last_mut() {
            Some(p) if p.is_quantizable() => p,
            _ => {
                return Err(Error::Structure(format!(
                    "batchnorm at layer {i} does not follow a conv or linear layer"
                )))
            }
        };
        if prev.quant().is_some() {
            return Err(Error::Structure(format!(
                "batchnorm at layer {i} follows an already-quantized layer"
            )));
        }
        let w = prev.weight().expect("quantizable layers carry weights");
        let chans = w.shape()[0];
        if chans != bn.gamma.len() {
            return Err(Error::Structure(format!(
                "batchnorm at layer {i} has {} channels, preceding layer has {chans}",
                bn.gamma.len()
            )));
        }
        let per = w.row_len();
        let factors: Vec<f64> = (0..chans)
            .map(|c| bn.gamma[c] as f64 / (bn.var[c] as f64 + bn.eps as f64).sqrt())
            .collect();
        let wm = prev.weight_mut().expect("checked above");
        for (c, &f) in factors.iter().enumerate() {
            for v in &mut wm.data_mut()[c * per..][..per] {
                *v = (*v as f64 * f) as f32;
            }
        }
        let b = prev.bias_mut().expect("checked above");
        for (c, &f) in factors.iter().enumerate() {
            b[c] = ((b[c] as f64 - bn.mean[c] as f64) * f + bn.beta[c] as f64) as f32;
        }
    }
    ModelGraph::new(out, graph.input_shape.clone(), graph.classes)
}
