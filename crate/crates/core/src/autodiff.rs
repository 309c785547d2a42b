//! Reverse-mode differentiation over a sequence of layers.
//!
//! A forward pass records each layer's input (plus whatever the layer needs
//! to differentiate itself, e.g. max-pool winners); the backward pass walks
//! the record in reverse and yields parameter gradients, the gradient of
//! every conv/linear pre-activation, and the input gradient.

use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph};
use crate::ops::{self, BnParams};
use crate::quant;
use crate::tensor::{Batch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch-norm normalises with batch statistics.
    Train,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    MaxArg(Vec<usize>),
    BnTrain {
        x_hat: Tensor,
        inv_std: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Input of layer `i`; index `len` is the final output.
    pub fn activation(&self, i: usize) -> &Tensor {
        if i == self.inputs.len() {
            &self.output
        } else {
            &self.inputs[i]
        }
    }

    /// Batch mean and biased variance seen by a training-mode batch-norm layer.
    pub fn bn_batch_stats(&self, i: usize) -> Option<(&[f32], &[f32])> {
        match &self.aux[i] {
            Aux::BnTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

fn apply(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Aux)> {
    Ok(match layer {
        Layer::Conv2d(c) => (ops::conv2d(x, &c.weight, &c.bias, c.stride, c.pad)?, Aux::None),
        Layer::Linear(l) => (ops::linear(x, &l.weight, &l.bias)?, Aux::None),
        Layer::BatchNorm(bn) => match mode {
            Mode::Eval => (
                ops::batchnorm_eval(
                    x,
                    BnParams {
                        gamma: &bn.gamma,
                        beta: &bn.beta,
                        mean: &bn.mean,
                        var: &bn.var,
                        eps: bn.eps,
                    },
                )?,
                Aux::None,
            ),
            Mode::Train => {
                let o = ops::batchnorm_train(x, &bn.gamma, &bn.beta, bn.eps)?;
                (
                    o.output,
                    Aux::BnTrain {
                        x_hat: o.x_hat,
                        inv_std: o.inv_std,
                        mean: o.batch_mean,
                        var: o.batch_var,
                    },
                )
            }
        },
        Layer::Relu => (ops::relu(x), Aux::None),
        Layer::MaxPool { kernel, stride } => {
            let (y, arg) = ops::maxpool2d(x, *kernel, *stride)?;
            (y, Aux::MaxArg(arg))
        }
        Layer::AvgPool { kernel, stride } => (ops::avgpool2d(x, *kernel, *stride)?, Aux::None),
        Layer::Flatten => {
            let n = x.batch();
            let d = x.row_len();
            (x.clone().reshape(vec![n, d])?, Aux::None)
        }
        Layer::FakeQuant(a) => (quant::fake_quant_act(x, a.scale, a.bits)?, Aux::None),
    })
}

/// Forward pass without recording.
pub fn forward(layers: &[Layer], x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut cur = x.clone();
    for l in layers {
        cur = apply(l, &cur, mode)?.0;
    }
    Ok(cur)
}

pub fn forward_trace(layers: &[Layer], x: &Tensor, mode: Mode) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut aux = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        let (y, a) = apply(l, &cur, mode)?;
        inputs.push(std::mem::replace(&mut cur, y));
        aux.push(a);
    }
    Ok(Trace {
        inputs,
        aux,
        output: cur,
    })
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    None,
    /// Conv or linear.
    Affine { weight: Vec<f32>, bias: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
    /// Activation quantizer scale.
    Scale(f32),
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<ParamGrad>,
    /// Gradient w.r.t. the output of each conv/linear layer (its pre-activation).
    pub pre_activations: Vec<Option<Tensor>>,
    pub input: Tensor,
}

impl Gradients {
    pub fn weight(&self, i: usize) -> Option<&[f32]> {
        match &self.params[i] {
            ParamGrad::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }
}

pub fn backward(layers: &[Layer], trace: &Trace, grad_out: Tensor) -> Result<Gradients> {
    if trace.inputs.len() != layers.len() {
        return Err(Error::State(format!(
            "trace recorded {} layers but backward was given {}",
            trace.inputs.len(),
            layers.len()
        )));
    }
    if grad_out.shape() != trace.output.shape() {
        return Err(crate::error::dim_err(
            "backward",
            format!("gradient {:?} vs output {:?}", grad_out.shape(), trace.output.shape()),
        ));
    }
    let mut params = vec![ParamGrad::None; layers.len()];
    let mut pre = vec![None; layers.len()];
    let mut g = grad_out;
    for i in (0..layers.len()).rev() {
        let x = &trace.inputs[i];
        g = match &layers[i] {
            Layer::Conv2d(c) => {
                pre[i] = Some(g.clone());
                let r = ops::conv2d_backward(x, &c.weight, &g, c.stride, c.pad)?;
                params[i] = ParamGrad::Affine {
                    weight: r.weight,
                    bias: r.bias,
                };
                r.input
            }
            Layer::Linear(l) => {
                pre[i] = Some(g.clone());
                let r = ops::linear_backward(x, &l.weight, &g)?;
                params[i] = ParamGrad::Affine {
                    weight: r.weight,
                    bias: r.bias,
                };
                r.input
            }
            Layer::BatchNorm(bn) => {
                let r = match &trace.aux[i] {
                    Aux::BnTrain { x_hat, inv_std, .. } => ops::batchnorm_train_backward(x_hat, &bn.gamma, inv_std, &g)?,
                    _ => ops::batchnorm_eval_backward(
                        BnParams {
                            gamma: &bn.gamma,
                            beta: &bn.beta,
                            mean: &bn.mean,
                            var: &bn.var,
                            eps: bn.eps,
                        },
                        x,
                        &g,
                    )?,
                };
                params[i] = ParamGrad::BatchNorm {
                    gamma: r.gamma,
                    beta: r.beta,
                };
                r.input
            }
            Layer::Relu => ops::relu_backward(x, &g),
            Layer::MaxPool { .. } => match &trace.aux[i] {
                Aux::MaxArg(arg) => ops::maxpool2d_backward(x.shape(), arg, &g),
                _ => return Err(Error::State("max-pool trace lost its argmax record".into())),
            },
            Layer::AvgPool { kernel, stride } => ops::avgpool2d_backward(x.shape(), *kernel, *stride, &g),
            Layer::Flatten => g.reshape(x.shape().to_vec())?,
            Layer::FakeQuant(a) => {
                let (gx, gs) = quant::fake_quant_act_backward(x, a.scale, a.bits, &g);
                params[i] = ParamGrad::Scale(gs);
                gx
            }
        };
    }
    Ok(Gradients {
        params,
        pre_activations: pre,
        input: g,
    })
}

/// Forward/backward driver for a whole graph under cross-entropy loss.
pub struct Tape<'g> {
    graph: &'g ModelGraph,
    mode: Mode,
    recorded: Option<(Trace, Tensor)>,
}

impl<'g> Tape<'g> {
    pub fn new(graph: &'g ModelGraph, mode: Mode) -> Self {
        Self {
            graph,
            mode,
            recorded: None,
        }
    }

    /// Records a forward pass and returns the mean cross-entropy loss.
    pub fn forward(&mut self, batch: &Batch) -> Result<f32> {
        let trace = forward_trace(&self.graph.layers, &batch.inputs, self.mode)?;
        let ce = ops::softmax_cross_entropy(trace.output(), &batch.labels)?;
        self.recorded = Some((trace, ce.grad));
        Ok(ce.loss)
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.recorded.as_ref().map(|(t, _)| t)
    }

    /// Gradients of the last recorded loss.
    pub fn backward(&self) -> Result<Gradients> {
        let (trace, g) = self
            .recorded
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        backward(&self.graph.layers, trace, g.clone())
    }
}
