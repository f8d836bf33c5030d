//! Multiply-accumulate and parameter counting.
//!
//! One MAC counts as one FLOP. Convolutions contribute `k²·C_in·C_out·h′·w′`
//! and the classifier `in·out`; BN, ReLU, pooling and adds are free.

use super::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::compute::{conv_output_size, Scalar};
use crate::{Error, Result};

/// `(channels, height, width)` of every layer's output for an input of
/// `input_hw`. Pooled and linear outputs report `1×1` spatial size.
pub fn layer_shapes(layers: &[LayerSpec], input_hw: (usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
    for l in layers {
        let src = l.inputs.first().map(|&s| shapes[s]);
        let shape = match (&l.kind, src) {
            (LayerKind::Input { channels }, _) => (*channels, input_hw.0, input_hw.1),
            (
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                Some((_, h, w)),
            ) => {
                let oh = conv_output_size(h, *kernel, *stride, *pad);
                let ow = conv_output_size(w, *kernel, *stride, *pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => (*out_channels, oh, ow),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "layer {} cannot process a {h}×{w} input",
                            l.name
                        )))
                    }
                }
            }
            (LayerKind::Bn { .. } | LayerKind::Relu, Some(s)) => s,
            (LayerKind::Add, Some(s)) => {
                let other = shapes[l.inputs[1]];
                if other != s {
                    return Err(Error::InvalidArgument(format!(
                        "add {} joins {s:?} and {other:?}",
                        l.name
                    )));
                }
                s
            }
            (LayerKind::Avgpool, Some((c, _, _))) => (c, 1, 1),
            (LayerKind::Linear { out_features, .. }, Some(_)) => (*out_features, 1, 1),
            _ => unreachable!("validated graphs give every non-input layer a producer"),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Multiply-accumulates of one forward pass over a single `input_hw` image.
pub fn flops_count<T: Scalar>(graph: &ModelGraph<T>, input_hw: (usize, usize)) -> Result<u64> {
    let shapes = layer_shapes(graph.layers(), input_hw)?;
    let mut total = 0u64;
    for (l, &(c, h, w)) in graph.layers().iter().zip(&shapes) {
        total += match l.kind {
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => (kernel * kernel * in_channels * c * h * w) as u64,
            LayerKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            _ => 0,
        };
    }
    Ok(total)
}

/// Learnable parameters: convolution weights, BN γ and β, linear weights
/// and biases. Running statistics are not counted.
pub fn param_count<T: Scalar>(graph: &ModelGraph<T>) -> u64 {
    graph
        .layers()
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * out_channels * kernel * kernel) as u64,
            LayerKind::Bn { channels } => 2 * channels as u64,
            LayerKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
            _ => 0,
        })
        .sum()
}
