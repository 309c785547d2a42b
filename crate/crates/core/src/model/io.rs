//! Model container: a JSON manifest plus one little-endian binary blob.
//!
//! The manifest lists layers in order; each tensor entry records its name,
//! dtype (`f32` or `i8`), shape, and byte range inside the blob. Float data is
//! IEEE-754 binary32, row-major (NCHW activations, OIKK kernels). Quantized
//! layers add a `bits` field plus `scales` (f32, one per output channel) and
//! `codes` (i8, two's complement, weight-shaped) tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActQuant, BatchNorm, Conv2d, Layer, Linear, ModelGraph, WeightQuant};
use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "unitquant-model";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_KINDS: &[&str] = &[
    "conv",
    "linear",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "flatten",
    "fakequant",
];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn f32s(&mut self, name: &str, shape: &[usize], data: &[f32]) -> TensorEntry {
        let offset = self.bytes.len();
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            name: name.into(),
            dtype: "f32".into(),
            shape: shape.to_vec(),
            offset,
            length: data.len() * 4,
        }
    }

    fn i8s(&mut self, name: &str, shape: &[usize], data: &[i8]) -> TensorEntry {
        let offset = self.bytes.len();
        self.bytes.extend(data.iter().map(|&v| v as u8));
        TensorEntry {
            name: name.into(),
            dtype: "i8".into(),
            shape: shape.to_vec(),
            offset,
            length: data.len(),
        }
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn affine_entry(
    kind: &str,
    weight: &Tensor,
    bias: &[f32],
    quant: Option<&WeightQuant>,
) -> (LayerEntry, Vec<(String, Vec<usize>, Payload)>) {
    let mut payloads = vec![
        ("weight".to_string(), weight.shape().to_vec(), Payload::F32(weight.data().to_vec())),
        ("bias".to_string(), vec![bias.len()], Payload::F32(bias.to_vec())),
    ];
    let mut entry = LayerEntry {
        kind: kind.into(),
        ..Default::default()
    };
    if let Some(q) = quant {
        entry.bits = Some(q.params.bits);
        payloads.push(("scales".into(), vec![q.params.scales.len()], Payload::F32(q.params.scales.clone())));
        payloads.push(("codes".into(), weight.shape().to_vec(), Payload::I8(q.codes.clone())));
    }
    (entry, payloads)
}

enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<()> {
    let mut w = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let (mut entry, payloads) = match layer {
            Layer::Conv2d(c) => {
                let (mut e, p) = affine_entry("conv", &c.weight, &c.bias, c.quant.as_ref());
                e.stride = Some(c.stride);
                e.pad = Some(c.pad);
                (e, p)
            }
            Layer::Linear(l) => affine_entry("linear", &l.weight, &l.bias, l.quant.as_ref()),
            Layer::BatchNorm(bn) => {
                let c = bn.gamma.len();
                (
                    LayerEntry {
                        kind: "batchnorm".into(),
                        eps: Some(bn.eps),
                        ..Default::default()
                    },
                    vec![
                        ("gamma".into(), vec![c], Payload::F32(bn.gamma.clone())),
                        ("beta".into(), vec![c], Payload::F32(bn.beta.clone())),
                        ("mean".into(), vec![c], Payload::F32(bn.mean.clone())),
                        ("var".into(), vec![c], Payload::F32(bn.var.clone())),
                    ],
                )
            }
            Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => (
                LayerEntry {
                    kind: layer.kind().into(),
                    kernel: Some(*kernel),
                    stride: Some(*stride),
                    ..Default::default()
                },
                vec![],
            ),
            Layer::FakeQuant(a) => (
                LayerEntry {
                    kind: "fakequant".into(),
                    bits: Some(a.bits),
                    ..Default::default()
                },
                vec![("scale".into(), vec![1], Payload::F32(vec![a.scale]))],
            ),
            Layer::Relu | Layer::Flatten => (
                LayerEntry {
                    kind: layer.kind().into(),
                    ..Default::default()
                },
                vec![],
            ),
        };
        for (name, shape, p) in payloads {
            entry.tensors.push(match p {
                Payload::F32(d) => w.f32s(&name, &shape, &d),
                Payload::I8(d) => w.i8s(&name, &shape, &d),
            });
        }
        layers.push(entry);
    }
    let blob = blob_path(path);
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parameter(format!("cannot derive blob name from {}", path.display())))?
            .to_string(),
        input_shape: graph.input_shape.clone(),
        classes: graph.classes,
        layers,
    };
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob, w.bytes)?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn slice(&self, t: &TensorEntry, elem: usize) -> Result<&[u8]> {
        let n: usize = t.shape.iter().product();
        if t.length != n * elem {
            return Err(Error::MalformedManifest(format!(
                "tensor `{}` declares {} bytes but shape {:?} of {} needs {}",
                t.name,
                t.length,
                t.shape,
                t.dtype,
                n * elem
            )));
        }
        let end = t.offset.checked_add(t.length).ok_or_else(|| {
            Error::MalformedManifest(format!("tensor `{}` byte range overflows", t.name))
        })?;
        if end > self.bytes.len() {
            return Err(Error::BlobLength {
                tensor: t.name.clone(),
                expected: end,
                actual: self.bytes.len(),
            });
        }
        Ok(&self.bytes[t.offset..end])
    }

    fn f32s(&self, t: &TensorEntry) -> Result<Vec<f32>> {
        if t.dtype != "f32" {
            return Err(Error::MalformedManifest(format!("tensor `{}` must be f32, is {}", t.name, t.dtype)));
        }
        Ok(self
            .slice(t, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn i8s(&self, t: &TensorEntry) -> Result<Vec<i8>> {
        if t.dtype != "i8" {
            return Err(Error::MalformedManifest(format!("tensor `{}` must be i8, is {}", t.name, t.dtype)));
        }
        Ok(self.slice(t, 1)?.iter().map(|&b| b as i8).collect())
    }
}

fn find<'e>(entry: &'e LayerEntry, idx: usize, name: &str) -> Result<&'e TensorEntry> {
    entry
        .tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::MalformedManifest(format!("layer {idx} ({}) lacks tensor `{name}`", entry.kind)))
}

fn field<T: Copy>(v: Option<T>, idx: usize, kind: &str, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::MalformedManifest(format!("layer {idx} ({kind}) lacks field `{name}`")))
}

fn read_affine(
    entry: &LayerEntry,
    idx: usize,
    blob: &BlobReader<'_>,
) -> Result<(Tensor, Vec<f32>, Option<WeightQuant>)> {
    let wt = find(entry, idx, "weight")?;
    let weight = Tensor::new(wt.shape.clone(), blob.f32s(wt)?)
        .map_err(|e| Error::MalformedManifest(format!("layer {idx}: {e}")))?;
    let bias = blob.f32s(find(entry, idx, "bias")?)?;
    let quant = match entry.bits {
        None => None,
        Some(bits) => {
            let scales = blob.f32s(find(entry, idx, "scales")?)?;
            let ct = find(entry, idx, "codes")?;
            if ct.shape != wt.shape {
                return Err(Error::MalformedManifest(format!(
                    "layer {idx}: codes shape {:?} differs from weight shape {:?}",
                    ct.shape, wt.shape
                )));
            }
            let codes = blob.i8s(ct)?;
            let params = QuantParams::new(bits as i64, scales)
                .map_err(|e| Error::MalformedManifest(format!("layer {idx}: {e}")))?;
            Some(WeightQuant { params, codes })
        }
    };
    Ok((weight, bias, quant))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read(path)?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    // unknown kinds are reported before any structural decoding
    if let Some(layers) = raw.get("layers").and_then(|l| l.as_array()) {
        for l in layers {
            if let Some(kind) = l.get("kind").and_then(|k| k.as_str()) {
                if !SUPPORTED_KINDS.contains(&kind) {
                    return Err(Error::UnknownLayerKind {
                        kind: kind.into(),
                        supported: SUPPORTED_KINDS.join(", "),
                    });
                }
            }
        }
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if m.format != FORMAT_NAME {
        return Err(Error::MalformedManifest(format!("unexpected format `{}`", m.format)));
    }
    if m.version != FORMAT_VERSION {
        return Err(Error::MalformedManifest(format!("unsupported version {}", m.version)));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let bytes = fs::read(&blob_file)?;
    let blob = BlobReader { bytes: &bytes };
    let mut layers = Vec::with_capacity(m.layers.len());
    for (idx, e) in m.layers.iter().enumerate() {
        let layer = match e.kind.as_str() {
            "conv" => {
                let (weight, bias, quant) = read_affine(e, idx, &blob)?;
                Layer::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride: field(e.stride, idx, "conv", "stride")?,
                    pad: field(e.pad, idx, "conv", "pad")?,
                    quant,
                })
            }
            "linear" => {
                let (weight, bias, quant) = read_affine(e, idx, &blob)?;
                Layer::Linear(Linear { weight, bias, quant })
            }
            "batchnorm" => Layer::BatchNorm(BatchNorm {
                gamma: blob.f32s(find(e, idx, "gamma")?)?,
                beta: blob.f32s(find(e, idx, "beta")?)?,
                mean: blob.f32s(find(e, idx, "mean")?)?,
                var: blob.f32s(find(e, idx, "var")?)?,
                eps: field(e.eps, idx, "batchnorm", "eps")?,
            }),
            "relu" => Layer::Relu,
            "flatten" => Layer::Flatten,
            "maxpool" => Layer::MaxPool {
                kernel: field(e.kernel, idx, "maxpool", "kernel")?,
                stride: field(e.stride, idx, "maxpool", "stride")?,
            },
            "avgpool" => Layer::AvgPool {
                kernel: field(e.kernel, idx, "avgpool", "kernel")?,
                stride: field(e.stride, idx, "avgpool", "stride")?,
            },
            "fakequant" => {
                let s = blob.f32s(find(e, idx, "scale")?)?;
                Layer::FakeQuant(ActQuant {
                    bits: field(e.bits, idx, "fakequant", "bits")?,
                    scale: *s.first().ok_or_else(|| Error::MalformedManifest(format!("layer {idx}: empty scale")))?,
                })
            }
            other => {
                return Err(Error::UnknownLayerKind {
                    kind: other.into(),
                    supported: SUPPORTED_KINDS.join(", "),
                })
            }
        };
        layers.push(layer);
    }
    ModelGraph::new(layers, m.input_shape, m.classes)
}
