use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::{Error, Result};

/// Network families the builders know about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    /// CIFAR ResNet of depth `6·n_per_stage + 2` with widths 16/32/64.
    Resnet { n_per_stage: usize },
    /// Straight conv-bn-relu chain; every second layer downsamples.
    Plain { widths: Vec<usize> },
}

impl Architecture {
    pub fn specs(&self, input_channels: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
        match self {
            Architecture::Resnet { n_per_stage } => {
                resnet_cifar_specs(*n_per_stage, input_channels, num_classes)
            }
            Architecture::Plain { widths } => plain_cnn_specs(widths, input_channels, num_classes),
        }
    }

    pub fn build<R: Rng + ?Sized>(
        &self,
        input_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<ModelGraph> {
        ModelGraph::init(self.specs(input_channels, num_classes)?, rng)
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(input_channels: usize) -> Self {
        Self {
            layers: vec![LayerSpec::new(
                "input",
                LayerKind::Input {
                    channels: input_channels,
                },
                vec![],
            )],
        }
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.layers.push(LayerSpec::new(name, kind, inputs));
        self.layers.len() - 1
    }

    /// conv + bn, returning the BN index.
    fn conv_bn(&mut self, prefix: &str, from: usize, cin: usize, cout: usize, kernel: usize, stride: usize) -> usize {
        let conv = self.push(
            format!("{prefix}.conv"),
            LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                pad: kernel / 2,
            },
            vec![from],
        );
        self.push(format!("{prefix}.bn"), LayerKind::Bn { channels: cout }, vec![conv])
    }

    fn relu(&mut self, prefix: &str, from: usize) -> usize {
        self.push(format!("{prefix}.relu"), LayerKind::Relu, vec![from])
    }

    fn head(mut self, from: usize, features: usize, num_classes: usize) -> Vec<LayerSpec> {
        let pool = self.push("pool".into(), LayerKind::Avgpool, vec![from]);
        self.push(
            "fc".into(),
            LayerKind::Linear {
                in_features: features,
                out_features: num_classes,
            },
            vec![pool],
        );
        self.layers
    }
}

/// Layer table of a CIFAR-style ResNet with `n` basic blocks per stage.
///
/// Stage transitions downsample with a strided 1×1 projection shortcut;
/// all other shortcuts are identities.
pub fn resnet_cifar_specs(n: usize, input_channels: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
    if n == 0 {
        return Err(Error::InvalidArgument("a ResNet needs at least one block per stage".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let mut b = Builder::new(input_channels);
    let stem = b.conv_bn("stem", 0, input_channels, 16, 3, 1);
    let mut x = b.relu("stem", stem);
    let mut width = 16;
    for (s, &w) in [16usize, 32, 64].iter().enumerate() {
        for j in 0..n {
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            let p = format!("layer{}.{}", s + 1, j);
            let bn1 = b.conv_bn(&format!("{p}.1"), x, width, w, 3, stride);
            let r1 = b.relu(&format!("{p}.1"), bn1);
            let bn2 = b.conv_bn(&format!("{p}.2"), r1, w, w, 3, 1);
            let shortcut = if stride != 1 || width != w {
                b.conv_bn(&format!("{p}.shortcut"), x, width, w, 1, stride)
            } else {
                x
            };
            let add = b.push(format!("{p}.add"), LayerKind::Add, vec![bn2, shortcut]);
            x = b.relu(&format!("{p}.out"), add);
            width = w;
        }
    }
    Ok(b.head(x, width, num_classes))
}

/// Layer table of a plain conv-bn-relu chain with the given widths.
pub fn plain_cnn_specs(widths: &[usize], input_channels: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::InvalidArgument("widths must be non-empty and positive".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let mut b = Builder::new(input_channels);
    let mut x = 0;
    let mut cin = input_channels;
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i % 2 == 1 { 2 } else { 1 };
        let p = format!("conv{}", i + 1);
        let bn = b.conv_bn(&p, x, cin, w, 3, stride);
        x = b.relu(&p, bn);
        cin = w;
    }
    Ok(b.head(x, cin, num_classes))
}

/// A freshly initialized CIFAR ResNet (`n = 9` is ResNet-56).
pub fn build_resnet_cifar<R: Rng + ?Sized>(n: usize, num_classes: usize, rng: &mut R) -> Result<ModelGraph> {
    ModelGraph::init(resnet_cifar_specs(n, 3, num_classes)?, rng)
}

/// A freshly initialized plain CNN on 3-channel input.
pub fn build_plain_cnn<R: Rng + ?Sized>(widths: &[usize], num_classes: usize, rng: &mut R) -> Result<ModelGraph> {
    ModelGraph::init(plain_cnn_specs(widths, 3, num_classes)?, rng)
}

/// Weighted depth counting main-path convolutions and the classifier
/// (projection shortcuts excluded), e.g. 8 for ResNet-8.
pub fn weighted_depth(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .filter(|l| {
            matches!(l.kind, LayerKind::Linear { .. })
                || (l.is_conv() && !l.name.contains(".shortcut"))
        })
        .count()
}
