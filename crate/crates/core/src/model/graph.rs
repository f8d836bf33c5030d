use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compute::{BatchNormState, Scalar, Tensor};
use crate::{Error, Result};

/// Static description of one node of the layer graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// The network input; always layer 0.
    Input { channels: usize },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Bn { channels: usize },
    Relu,
    /// Global average pooling to a `B×C` matrix.
    Avgpool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Elementwise sum of two producers (residual join).
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Indices of producer layers, all smaller than this layer's index.
    pub inputs: Vec<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs,
        }
    }

    pub fn is_bn(&self) -> bool {
        matches!(self.kind, LayerKind::Bn { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

/// Learnable state attached to a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T = f32> {
    None,
    Conv { weight: Tensor<T> },
    Bn(BatchNormState<T>),
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> LayerParams<T> {
    fn cast<U: Scalar>(&self) -> LayerParams<U> {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { weight } => LayerParams::Conv { weight: weight.cast() },
            LayerParams::Bn(s) => LayerParams::Bn(s.cast()),
            LayerParams::Linear { weight, bias } => LayerParams::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
        }
    }

    /// Parameter slices in a fixed order (weight, bias / gamma, beta).
    pub(crate) fn slices(&self) -> Vec<&[T]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight } => vec![weight.data()],
            LayerParams::Bn(s) => vec![&s.gamma, &s.beta],
            LayerParams::Linear { weight, bias } => vec![weight.data(), bias.data()],
        }
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight } => vec![weight.data_mut()],
            LayerParams::Bn(s) => vec![&mut s.gamma, &mut s.beta],
            LayerParams::Linear { weight, bias } => vec![weight.data_mut(), bias.data_mut()],
        }
    }
}

/// A validated network: topologically ordered layers, their parameters and
/// the groups of BN layers whose channels are tied by residual additions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<T>>,
    coupling_groups: Vec<Vec<usize>>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates the layer table and parameters and derives coupling groups.
    pub fn new(layers: Vec<LayerSpec>, params: Vec<LayerParams<T>>) -> Result<Self> {
        validate_layers(&layers)?;
        if params.len() != layers.len() {
            return Err(Error::InvalidGraph(format!(
                "{} parameter entries for {} layers",
                params.len(),
                layers.len()
            )));
        }
        for (spec, p) in layers.iter().zip(&params) {
            check_params(spec, p)?;
        }
        let coupling_groups = coupling_groups(&layers);
        Ok(Self {
            layers,
            params,
            coupling_groups,
        })
    }

    /// Fresh parameters: He-normal (fan-out) convolutions, γ = 1, β = 0 and
    /// a uniform `±1/√in` linear head.
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        validate_layers(&layers)?;
        let params = layers
            .iter()
            .map(|spec| match spec.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_out = (out_channels * kernel * kernel) as f64;
                    LayerParams::Conv {
                        weight: Tensor::randn(
                            &[out_channels, in_channels, kernel, kernel],
                            (2.0 / fan_out).sqrt(),
                            rng,
                        ),
                    }
                }
                LayerKind::Bn { channels } => LayerParams::Bn(BatchNormState::new(channels)),
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let bound = 1.0 / (in_features as f64).sqrt();
                    LayerParams::Linear {
                        weight: Tensor::uniform(&[out_features, in_features], bound, rng),
                        bias: Tensor::uniform(&[out_features], bound, rng),
                    }
                }
                _ => LayerParams::None,
            })
            .collect();
        Self::new(layers, params)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn coupling_groups(&self) -> &[Vec<usize>] {
        &self.coupling_groups
    }

    /// The coupling group containing BN layer `bn`, if any.
    pub fn group_of(&self, bn: usize) -> Option<&[usize]> {
        self.coupling_groups
            .iter()
            .find(|g| g.contains(&bn))
            .map(|g| g.as_slice())
    }

    pub fn input_channels(&self) -> usize {
        match self.layers[0].kind {
            LayerKind::Input { channels } => channels,
            _ => unreachable!("validated graphs start with an input layer"),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Linear { out_features, .. }) => *out_features,
            _ => unreachable!("validated graphs end with a linear layer"),
        }
    }

    /// Indices of every BN layer, in graph order.
    pub fn bn_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_bn()).collect()
    }

    pub fn bn(&self, layer: usize) -> Option<&BatchNormState<T>> {
        match &self.params[layer] {
            LayerParams::Bn(s) => Some(s),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, layer: usize) -> Option<&mut BatchNormState<T>> {
        match &mut self.params[layer] {
            LayerParams::Bn(s) => Some(s),
            _ => None,
        }
    }

    /// Channels produced by each layer (features for the linear head).
    pub fn output_channels(&self) -> Vec<usize> {
        output_channels(&self.layers)
    }

    /// The BN layer whose channel set governs the output of `layer`, or
    /// `None` when the channels come straight from the network input.
    pub fn channel_source(&self, layer: usize) -> Option<usize> {
        channel_sources(&self.layers, layer).into_iter().next()
    }

    /// Every parameter slice in optimizer order.
    pub fn param_slices(&self) -> Vec<&[T]> {
        self.params.iter().flat_map(|p| p.slices()).collect()
    }

    /// Mutable parameter slices in the same order as [`Self::param_slices`]
    /// and [`Gradients::slices`](super::Gradients::slices).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.params.iter_mut().flat_map(|p| p.slices_mut()).collect()
    }

    /// Architecture fingerprint: SHA-256 over the layer table.
    pub fn fingerprint(&self) -> String {
        let table = serde_json::to_vec(&self.layers).expect("layer table serializes");
        hex::encode(Sha256::digest(&table))
    }

    /// SHA-256 over every parameter and running statistic.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            let vecs: Vec<&[T]> = match p {
                LayerParams::None => vec![],
                LayerParams::Conv { weight } => vec![weight.data()],
                LayerParams::Bn(s) => vec![&s.gamma, &s.beta, &s.running_mean, &s.running_var],
                LayerParams::Linear { weight, bias } => vec![weight.data(), bias.data()],
            };
            for v in vecs {
                for x in v {
                    h.update(x.as_f64().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            coupling_groups: self.coupling_groups.clone(),
        }
    }

    /// BN layer names mapped to their channel counts.
    pub fn bn_channel_table(&self) -> BTreeMap<String, usize> {
        self.bn_layers()
            .into_iter()
            .map(|i| (self.layers[i].name.clone(), self.bn(i).map_or(0, |s| s.channels())))
            .collect()
    }
}

fn arity(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Input { .. } => 0,
        LayerKind::Add => 2,
        _ => 1,
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidGraph(msg));
    match layers.first().map(|l| &l.kind) {
        Some(LayerKind::Input { channels }) if *channels > 0 => {}
        _ => return bad("the first layer must be an input with positive channels".into()),
    }
    match layers.last().map(|l| &l.kind) {
        Some(LayerKind::Linear { .. }) => {}
        _ => return bad("the last layer must be the linear classifier".into()),
    }
    let mut names = std::collections::HashSet::new();
    for (i, l) in layers.iter().enumerate() {
        if !names.insert(l.name.as_str()) {
            return bad(format!("duplicate layer name {:?}", l.name));
        }
        if i > 0 && matches!(l.kind, LayerKind::Input { .. }) {
            return bad(format!("layer {i} ({}) is a second input", l.name));
        }
        if l.inputs.len() != arity(&l.kind) {
            return bad(format!(
                "layer {i} ({}) takes {} inputs, got {}",
                l.name,
                arity(&l.kind),
                l.inputs.len()
            ));
        }
        if let Some(&src) = l.inputs.iter().find(|&&s| s >= i) {
            return bad(format!(
                "layer {i} ({}) reads layer {src}, which is not earlier in topological order",
                l.name
            ));
        }
    }

    // Every convolution feeds exactly one consumer: the BN right after it.
    for (i, l) in layers.iter().enumerate() {
        if !l.is_conv() {
            continue;
        }
        let consumers: Vec<usize> = (0..layers.len())
            .filter(|&j| layers[j].inputs.contains(&i))
            .collect();
        let next_ok = layers
            .get(i + 1)
            .is_some_and(|n| n.is_bn() && n.inputs == [i]);
        if !next_ok || consumers != [i + 1] {
            return bad(format!(
                "convolution {i} ({}) must be followed by a batch-norm that is its only consumer",
                l.name
            ));
        }
    }

    // Channel and rank bookkeeping.
    let channels = output_channels(layers);
    let mut flat = vec![false; layers.len()];
    for (i, l) in layers.iter().enumerate() {
        let src = l.inputs.first().copied();
        let in_ch = src.map(|s| channels[s]);
        let in_flat = src.is_some_and(|s| flat[s]);
        match &l.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_flat || in_ch != Some(*in_channels) {
                    return bad(format!(
                        "conv {i} ({}) expects {in_channels} input channels, producer has {:?}",
                        l.name, in_ch
                    ));
                }
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return bad(format!("conv {i} ({}) has a zero dimension", l.name));
                }
            }
            LayerKind::Bn { channels: c } => {
                if in_flat || in_ch != Some(*c) || *c == 0 {
                    return bad(format!(
                        "bn {i} ({}) has {c} channels, producer has {:?}",
                        l.name, in_ch
                    ));
                }
            }
            LayerKind::Relu => flat[i] = in_flat,
            LayerKind::Avgpool => {
                if in_flat {
                    return bad(format!("avgpool {i} ({}) needs a spatial input", l.name));
                }
                flat[i] = true;
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if !in_flat || in_ch != Some(*in_features) || *out_features == 0 {
                    return bad(format!(
                        "linear {i} ({}) expects {in_features} pooled features, producer has {:?}",
                        l.name, in_ch
                    ));
                }
                flat[i] = true;
            }
            LayerKind::Add => {
                let (a, b) = (l.inputs[0], l.inputs[1]);
                if channels[a] != channels[b] || flat[a] != flat[b] {
                    return bad(format!(
                        "add {i} ({}) joins {} and {} channels",
                        l.name, channels[a], channels[b]
                    ));
                }
                flat[i] = flat[a];
            }
        }
    }
    Ok(())
}

fn check_params<T: Scalar>(spec: &LayerSpec, p: &LayerParams<T>) -> Result<()> {
    let ok = match (&spec.kind, p) {
        (
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            },
            LayerParams::Conv { weight },
        ) => weight.shape() == [*out_channels, *in_channels, *kernel, *kernel],
        (LayerKind::Bn { channels }, LayerParams::Bn(s)) => {
            s.validate()?;
            s.channels() == *channels
        }
        (
            LayerKind::Linear {
                in_features,
                out_features,
            },
            LayerParams::Linear { weight, bias },
        ) => weight.shape() == [*out_features, *in_features] && bias.shape() == [*out_features],
        (LayerKind::Input { .. } | LayerKind::Relu | LayerKind::Avgpool | LayerKind::Add, LayerParams::None) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidGraph(format!(
            "parameters of layer {} do not match its specification",
            spec.name
        )))
    }
}

pub(crate) fn output_channels(layers: &[LayerSpec]) -> Vec<usize> {
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let c = match &l.kind {
            LayerKind::Input { channels } => *channels,
            LayerKind::Conv { out_channels, .. } => *out_channels,
            LayerKind::Bn { channels } => *channels,
            LayerKind::Linear { out_features, .. } => *out_features,
            LayerKind::Relu | LayerKind::Avgpool | LayerKind::Add => {
                l.inputs.first().map_or(0, |&s| out.get(s).copied().unwrap_or(0))
            }
        };
        out.push(c);
    }
    out
}

/// All BN layers that define the channels of `layer`'s output, following
/// identity paths (ReLU, pooling, residual adds).
pub(crate) fn channel_sources(layers: &[LayerSpec], layer: usize) -> Vec<usize> {
    let mut found = Vec::new();
    let mut stack = vec![layer];
    while let Some(i) = stack.pop() {
        let l = &layers[i];
        match l.kind {
            LayerKind::Bn { .. } => found.push(i),
            LayerKind::Relu | LayerKind::Avgpool => stack.push(l.inputs[0]),
            LayerKind::Add => {
                stack.push(l.inputs[1]);
                stack.push(l.inputs[0]);
            }
            LayerKind::Conv { .. } => stack.push(i + 1),
            LayerKind::Input { .. } | LayerKind::Linear { .. } => {}
        }
    }
    found.sort_unstable();
    found.dedup();
    found
}

/// Union of the channel sources of every residual add.
fn coupling_groups(layers: &[LayerSpec]) -> Vec<Vec<usize>> {
    let n = layers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut coupled = vec![false; n];
    for (i, l) in layers.iter().enumerate() {
        if !matches!(l.kind, LayerKind::Add) {
            continue;
        }
        let members = channel_sources(layers, i);
        for w in members.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a.max(b)] = a.min(b);
        }
        for &m in &members {
            coupled[m] = true;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| coupled[i]) {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().filter(|g| g.len() > 1).collect()
}
