//! Forward and backward passes over a [`ModelGraph`].

use super::graph::{LayerKind, LayerParams, ModelGraph};
use crate::compute::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, global_avgpool_backward,
    global_avgpool_forward, linear_backward, linear_forward, relu_backward, relu_forward, sgd_update,
    BatchNormCache, OptimizerState, Scalar, Tensor,
};
use crate::{Error, Result};

/// Activations and BN caches recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T = f32> {
    acts: Vec<Tensor<T>>,
    bn_caches: Vec<Option<BatchNormCache<T>>>,
    training: bool,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.acts.last().expect("trace of a non-empty graph")
    }

    /// Output of layer `i`.
    pub fn activation(&self, i: usize) -> &Tensor<T> {
        &self.acts[i]
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads<T = f32> {
    None,
    Conv { weight: Tensor<T> },
    Bn { gamma: Vec<T>, beta: Vec<T> },
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> LayerGrads<T> {
    fn slices(&self) -> Vec<&[T]> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Conv { weight } => vec![weight.data()],
            LayerGrads::Bn { gamma, beta } => vec![gamma, beta],
            LayerGrads::Linear { weight, bias } => vec![weight.data(), bias.data()],
        }
    }
}

/// Parameter gradients aligned with the graph's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// ∂L/∂γ of BN layer `layer`.
    pub fn gamma(&self, layer: usize) -> Option<&[T]> {
        match self.layers.get(layer) {
            Some(LayerGrads::Bn { gamma, .. }) => Some(gamma),
            _ => None,
        }
    }

    pub fn gamma_mut(&mut self, layer: usize) -> Option<&mut Vec<T>> {
        match self.layers.get_mut(layer) {
            Some(LayerGrads::Bn { gamma, .. }) => Some(gamma),
            _ => None,
        }
    }

    pub fn conv_weight_mut(&mut self, layer: usize) -> Option<&mut Tensor<T>> {
        match self.layers.get_mut(layer) {
            Some(LayerGrads::Conv { weight }) => Some(weight),
            _ => None,
        }
    }

    /// Every gradient slice in optimizer order.
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Runs the graph in topological order. Training mode uses batch
    /// statistics and updates BN running averages.
    pub fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Trace<T>> {
        let (_, c, _, _) = input.dims4()?;
        if c != self.input_channels() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: input.shape().to_vec(),
                rhs: vec![self.input_channels()],
            });
        }
        let n = self.layers().len();
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut bn_caches = Vec::with_capacity(n);
        for i in 0..n {
            let spec = self.layers()[i].clone();
            let x = |k: usize| &acts[spec.inputs[k]];
            let mut cache = None;
            let out = match (&spec.kind, &mut self.params_mut()[i]) {
                (LayerKind::Input { .. }, _) => input.clone(),
                (LayerKind::Conv { stride, pad, .. }, LayerParams::Conv { weight }) => {
                    conv2d_forward(x(0), weight, *stride, *pad)?
                }
                (LayerKind::Bn { .. }, LayerParams::Bn(state)) => {
                    let (y, c) = batchnorm_forward(x(0), state, training)?;
                    cache = Some(c);
                    y
                }
                (LayerKind::Relu, _) => relu_forward(x(0)),
                (LayerKind::Avgpool, _) => global_avgpool_forward(x(0))?,
                (LayerKind::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                    linear_forward(x(0), weight, bias)?
                }
                (LayerKind::Add, _) => {
                    let mut y = x(0).clone();
                    y.add_assign(x(1))?;
                    y
                }
                _ => unreachable!("validated parameters match layer kinds"),
            };
            acts.push(out);
            bn_caches.push(cache);
        }
        Ok(Trace {
            acts,
            bn_caches,
            training,
        })
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let trace = scratch.forward(input, false)?;
        Ok(trace.acts.into_iter().last().expect("non-empty graph"))
    }

    /// Back-propagates `grad_logits` through a training-mode trace.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if !trace.training {
            return Err(Error::InvalidArgument(
                "backward needs a training-mode forward trace".into(),
            ));
        }
        let n = self.layers().len();
        if trace.acts.len() != n {
            return Err(Error::InvalidArgument("trace does not belong to this graph".into()));
        }
        let mut upstream: Vec<Option<Tensor<T>>> = vec![None; n];
        upstream[n - 1] = Some(grad_logits.clone());
        let mut grads: Vec<LayerGrads<T>> = vec![LayerGrads::None; n];

        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        for i in (1..n).rev() {
            let spec = &self.layers()[i];
            let Some(g) = upstream[i].take() else {
                // Output never consumed: parameters get zero gradient.
                grads[i] = zero_grads(&self.params()[i]);
                continue;
            };
            let src = spec.inputs[0];
            match (&spec.kind, &self.params()[i]) {
                (LayerKind::Conv { stride, pad, .. }, LayerParams::Conv { weight }) => {
                    let (gx, gw) = conv2d_backward(&g, &trace.acts[src], weight, *stride, *pad)?;
                    grads[i] = LayerGrads::Conv { weight: gw };
                    accumulate(&mut upstream[src], gx)?;
                }
                (LayerKind::Bn { .. }, LayerParams::Bn(_)) => {
                    let cache = trace.bn_caches[i].as_ref().expect("bn layers record a cache");
                    let (gx, gg, gb) = batchnorm_backward(&g, cache)?;
                    grads[i] = LayerGrads::Bn { gamma: gg, beta: gb };
                    accumulate(&mut upstream[src], gx)?;
                }
                (LayerKind::Relu, _) => {
                    let gx = relu_backward(&g, &trace.acts[i])?;
                    accumulate(&mut upstream[src], gx)?;
                }
                (LayerKind::Avgpool, _) => {
                    let gx = global_avgpool_backward(&g, trace.acts[src].shape())?;
                    accumulate(&mut upstream[src], gx)?;
                }
                (LayerKind::Linear { .. }, LayerParams::Linear { weight, .. }) => {
                    let (gx, gw, gb) = linear_backward(&g, &trace.acts[src], weight)?;
                    grads[i] = LayerGrads::Linear { weight: gw, bias: gb };
                    accumulate(&mut upstream[src], gx)?;
                }
                (LayerKind::Add, _) => {
                    accumulate(&mut upstream[spec.inputs[1]], g.clone())?;
                    accumulate(&mut upstream[src], g)?;
                }
                _ => unreachable!("validated parameters match layer kinds"),
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Zero gradients shaped like this graph's parameters.
    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self.params().iter().map(zero_grads).collect(),
        }
    }

    /// Applies one optimizer step with `grads`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, opt: &mut OptimizerState<T>) -> Result<()> {
        let g = grads.slices();
        let mut p = self.param_slices_mut();
        sgd_update(&mut p, &g, opt)
    }
}

fn zero_grads<T: Scalar>(p: &LayerParams<T>) -> LayerGrads<T> {
    match p {
        LayerParams::None => LayerGrads::None,
        LayerParams::Conv { weight } => LayerGrads::Conv {
            weight: Tensor::zeros(weight.shape()),
        },
        LayerParams::Bn(s) => LayerGrads::Bn {
            gamma: vec![T::zero(); s.channels()],
            beta: vec![T::zero(); s.channels()],
        },
        LayerParams::Linear { weight, bias } => LayerGrads::Linear {
            weight: Tensor::zeros(weight.shape()),
            bias: Tensor::zeros(bias.shape()),
        },
    }
}
