//! Sequential network representation.

mod fold;
mod io;
mod units;

pub use fold::fold_batchnorm;
pub use io::{load_model, save_model, FORMAT_NAME, FORMAT_VERSION, SUPPORTED_KINDS};
pub use units::{partition_units, Unit};

use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Integer codes backing a quantized weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuant {
    pub params: QuantParams,
    pub codes: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// OIKK.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
    pub quant: Option<WeightQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// Out × in.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub quant: Option<WeightQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }
}

/// Per-tensor activation fake-quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub bits: u8,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    FakeQuant(ActQuant),
}

impl Layer {
    pub fn conv(weight: Tensor, bias: Vec<f32>, stride: usize, pad: usize) -> Self {
        Layer::Conv2d(Conv2d {
            weight,
            bias,
            stride,
            pad,
            quant: None,
        })
    }

    pub fn linear(weight: Tensor, bias: Vec<f32>) -> Self {
        Layer::Linear(Linear {
            weight,
            bias,
            quant: None,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::FakeQuant(_) => "fakequant",
        }
    }

    /// Conv and linear layers are the quantizable ones.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Linear(l) => Some(&mut l.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv2d(c) => Some(&c.bias),
            Layer::Linear(l) => Some(&l.bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.bias),
            Layer::Linear(l) => Some(&mut l.bias),
            _ => None,
        }
    }

    pub fn quant(&self) -> Option<&WeightQuant> {
        match self {
            Layer::Conv2d(c) => c.quant.as_ref(),
            Layer::Linear(l) => l.quant.as_ref(),
            _ => None,
        }
    }

    /// Installs codes and writes the dequantized values into the weight tensor.
    pub fn set_quant(&mut self, q: WeightQuant) -> Result<()> {
        let shape = self
            .weight()
            .ok_or_else(|| Error::Structure(format!("{} layer has no weights to quantize", self.kind())))?
            .shape()
            .to_vec();
        let deq = crate::quant::dequantize(&q.codes, &q.params, &shape)?;
        match self {
            Layer::Conv2d(c) => {
                c.weight = deq;
                c.quant = Some(q);
            }
            Layer::Linear(l) => {
                l.weight = deq;
                l.quant = Some(q);
            }
            _ => unreachable!(),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// Per-sample input shape (C, H, W) or (D).
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelGraph {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let g = Self {
            layers,
            input_shape,
            classes,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks that layer shapes compose and the output has `classes` logits.
    pub fn validate(&self) -> Result<()> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let x = Tensor::zeros(&shape);
        let y = self
            .forward(&x)
            .map_err(|e| Error::Structure(format!("layers do not compose: {e}")))?;
        if y.shape() != [1, self.classes] {
            return Err(Error::Structure(format!(
                "network output {:?} does not match {} classes",
                y.shape(),
                self.classes
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = l {
                if bn.var.iter().any(|v| !(v + bn.eps > 0.0)) {
                    return Err(Error::Structure(format!("batchnorm at layer {i} has var + eps <= 0")));
                }
            }
        }
        Ok(())
    }

    /// Inference forward pass (batch-norm uses stored statistics).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        autodiff::forward(&self.layers, x, Mode::Eval)
    }

    /// Forward in chunks of `chunk` samples, concatenated.
    pub fn forward_chunked(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.batch();
        let mut parts = Vec::new();
        let mut s = 0;
        while s < n {
            let c = chunk.min(n - s);
            parts.push(self.forward(&x.rows(s, c))?);
            s += c;
        }
        Tensor::concat_rows(&parts)
    }

    /// Graph indices of conv/linear layers, in order.
    pub fn quantizable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight().map_or(0, Tensor::len) + l.bias().map_or(0, <[f32]>::len))
            .sum()
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().filter(|l| l.is_quantizable()).all(|l| l.quant().is_some())
    }
}
