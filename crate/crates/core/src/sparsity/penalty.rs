use serde::{Deserialize, Serialize};

use crate::compute::{Scalar, Tensor};
use crate::mask::ChannelMask;
use crate::model::{Gradients, LayerParams, ModelGraph};
use crate::{Error, Result};

/// Penalty applied to each scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// `|γ|`, subgradient `sign(γ)` with `sign(0) = 0`.
    #[default]
    L1,
    /// `γ²`, gradient `2γ`.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    #[default]
    Off,
    /// Every BN scaling factor.
    Global,
    /// Only scaling factors of channels marked by the pruning mask.
    Masked,
    /// Euclidean norm of every convolution filter.
    GroupLasso,
}

/// Which regularizer a training stage adds, and how strongly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub mode: SparsityMode,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub lambda: f64,
}

impl SparsityConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn global(lambda: f64) -> Self {
        Self {
            mode: SparsityMode::Global,
            norm: Norm::L1,
            lambda,
        }
    }

    pub fn masked(lambda: f64) -> Self {
        Self {
            mode: SparsityMode::Masked,
            norm: Norm::L1,
            lambda,
        }
    }

    pub fn validate(&self, mask: Option<&ChannelMask>) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.mode == SparsityMode::Masked && mask.is_none() {
            return Err(Error::InvalidArgument("masked sparsity needs a pruning mask".into()));
        }
        Ok(())
    }

    /// The configured penalty for the current parameters.
    pub fn penalty<T: Scalar>(&self, graph: &ModelGraph<T>, mask: Option<&ChannelMask>) -> Result<Penalty<T>> {
        self.validate(mask)?;
        Ok(match self.mode {
            SparsityMode::Off => Penalty::None,
            SparsityMode::Global => Penalty::Gamma(global_penalty(graph, self.lambda, self.norm)?),
            SparsityMode::Masked => Penalty::Gamma(masked_penalty(
                graph,
                mask.expect("validated above"),
                self.lambda,
                self.norm,
            )?),
            SparsityMode::GroupLasso => Penalty::Weight(group_lasso_penalty(graph, self.lambda)),
        })
    }
}

/// Penalty value and its (sub)gradient with respect to the scaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPenalty<T = f32> {
    pub loss: f64,
    /// `(BN layer index, ∂penalty/∂γ)` for every BN layer.
    pub grads: Vec<(usize, Vec<T>)>,
}

/// Penalty value and gradient with respect to convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPenalty<T = f32> {
    pub loss: f64,
    /// `(conv layer index, ∂penalty/∂W)`.
    pub grads: Vec<(usize, Tensor<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Penalty<T = f32> {
    None,
    Gamma(GammaPenalty<T>),
    Weight(WeightPenalty<T>),
}

impl<T: Scalar> Penalty<T> {
    pub fn loss(&self) -> f64 {
        match self {
            Penalty::None => 0.0,
            Penalty::Gamma(p) => p.loss,
            Penalty::Weight(p) => p.loss,
        }
    }

    /// Adds the penalty gradient to the task-loss gradients.
    pub fn add_to(&self, grads: &mut Gradients<T>) -> Result<()> {
        match self {
            Penalty::None => Ok(()),
            Penalty::Gamma(p) => {
                for (layer, g) in &p.grads {
                    let target = grads.gamma_mut(*layer).ok_or_else(|| {
                        Error::InvalidArgument(format!("layer {layer} has no γ gradient"))
                    })?;
                    for (t, &v) in target.iter_mut().zip(g) {
                        *t = *t + v;
                    }
                }
                Ok(())
            }
            Penalty::Weight(p) => {
                for (layer, g) in &p.grads {
                    let target = grads.conv_weight_mut(*layer).ok_or_else(|| {
                        Error::InvalidArgument(format!("layer {layer} has no weight gradient"))
                    })?;
                    target.add_assign(g)?;
                }
                Ok(())
            }
        }
    }
}

fn gamma_penalty<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: Option<&ChannelMask>,
    lambda: f64,
    norm: Norm,
) -> Result<GammaPenalty<T>> {
    let bns = graph.bn_layers();
    if bns.is_empty() {
        return Err(Error::InvalidArgument("graph has no batch-norm layers".into()));
    }
    if let Some(m) = mask {
        m.check_shape(graph)?;
    }
    let lam = T::from_f64(lambda);
    let two_lam = T::from_f64(2.0 * lambda);
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(bns.len());
    for l in bns {
        let gamma = &graph.bn(l).expect("bn layer").gamma;
        let mut g = vec![T::zero(); gamma.len()];
        for (c, (&v, gc)) in gamma.iter().zip(g.iter_mut()).enumerate() {
            if mask.is_some_and(|m| !m.is_pruned(l, c)) {
                continue;
            }
            match norm {
                Norm::L1 => {
                    total += v.abs().as_f64();
                    *gc = if v > T::zero() {
                        lam
                    } else if v < T::zero() {
                        -lam
                    } else {
                        T::zero()
                    };
                }
                Norm::L2 => {
                    total += v.as_f64() * v.as_f64();
                    *gc = two_lam * v;
                }
            }
        }
        grads.push((l, g));
    }
    Ok(GammaPenalty {
        loss: lambda * total,
        grads,
    })
}

/// `λ·Σ_l Σ_i ‖γ⁽ˡ⁾ᵢ‖` over every BN channel.
pub fn global_penalty<T: Scalar>(graph: &ModelGraph<T>, lambda: f64, norm: Norm) -> Result<GammaPenalty<T>> {
    gamma_penalty(graph, None, lambda, norm)
}

/// `λ·Σ_l Σ_i M⁽ˡ⁾ᵢ·‖γ⁽ˡ⁾ᵢ‖`: unmarked channels get exactly zero gradient.
pub fn masked_penalty<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: &ChannelMask,
    lambda: f64,
    norm: Norm,
) -> Result<GammaPenalty<T>> {
    gamma_penalty(graph, Some(mask), lambda, norm)
}

/// `λ·Σ ‖W_f‖₂` over every output filter `f` of every convolution, with
/// gradient `λ·W_f/‖W_f‖` (zero for an all-zero filter).
pub fn group_lasso_penalty<T: Scalar>(graph: &ModelGraph<T>, lambda: f64) -> WeightPenalty<T> {
    let mut total = 0.0f64;
    let mut grads = Vec::new();
    for (i, p) in graph.params().iter().enumerate() {
        let LayerParams::Conv { weight } = p else {
            continue;
        };
        let filter = weight.len() / weight.shape()[0];
        let mut g = vec![T::zero(); weight.len()];
        for (w, gf) in weight.data().chunks(filter).zip(g.chunks_mut(filter)) {
            let norm = w.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            total += norm;
            if norm > 0.0 {
                let scale = T::from_f64(lambda / norm);
                for (gv, &wv) in gf.iter_mut().zip(w) {
                    *gv = scale * wv;
                }
            }
        }
        grads.push((i, Tensor::new(weight.shape(), g).expect("same shape")));
    }
    WeightPenalty {
        loss: lambda * total,
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Provenance;
    use crate::model::build_plain_cnn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph_with(gamma: &[f32]) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = build_plain_cnn(&[gamma.len()], 2, &mut rng).unwrap();
        let bn = g.bn_layers()[0];
        g.bn_mut(bn).unwrap().gamma = gamma.to_vec();
        g
    }

    #[test]
    fn global_l1_example() {
        let g = graph_with(&[1.0, -2.0, 0.0]);
        let p = global_penalty(&g, 0.1, Norm::L1).unwrap();
        assert!((p.loss - 0.3).abs() < 1e-12);
        assert_eq!(p.grads[0].1, [0.1, -0.1, 0.0]);
        let z = global_penalty(&g, 0.0, Norm::L1).unwrap();
        assert_eq!(z.loss, 0.0);
        assert!(z.grads[0].1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_l1_example() {
        let g = graph_with(&[1.0, -2.0, 0.0]);
        let bn = g.bn_layers()[0];
        let m = ChannelMask::from_fn(&g, Provenance::Imported, |_, c| c > 0);
        let p = masked_penalty(&g, &m, 0.1, Norm::L1).unwrap();
        assert!((p.loss - 0.2).abs() < 1e-12);
        assert_eq!(p.grads[0], (bn, vec![0.0, -0.1, 0.0]));
    }

    #[test]
    fn l2_gradient() {
        let g = graph_with(&[1.0, -2.0]);
        let p = global_penalty(&g, 0.5, Norm::L2).unwrap();
        assert!((p.loss - 2.5).abs() < 1e-12);
        assert_eq!(p.grads[0].1, [1.0, -2.0]);
    }

    #[test]
    fn group_lasso_scalar_filter() {
        use crate::model::{LayerKind, LayerSpec};
        let layers = vec![
            LayerSpec::new("input", LayerKind::Input { channels: 1 }, vec![]),
            LayerSpec::new(
                "conv",
                LayerKind::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                vec![0],
            ),
            LayerSpec::new("bn", LayerKind::Bn { channels: 2 }, vec![1]),
            LayerSpec::new("pool", LayerKind::Avgpool, vec![2]),
            LayerSpec::new(
                "fc",
                LayerKind::Linear {
                    in_features: 2,
                    out_features: 2,
                },
                vec![3],
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ModelGraph::<f64>::init(layers, &mut rng).unwrap();
        if let LayerParams::Conv { weight } = &mut g.params_mut()[1] {
            weight.data_mut().copy_from_slice(&[3.0, 0.0]);
        }
        let p = group_lasso_penalty(&g, 1.0);
        assert_eq!(p.loss, 3.0);
        assert_eq!(p.grads[0].1.data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_mode_requires_mask() {
        let g = graph_with(&[1.0]);
        assert!(SparsityConfig::masked(1e-4).penalty(&g, None).is_err());
        let mut neg = SparsityConfig::global(1e-4);
        neg.lambda = -1.0;
        assert!(neg.penalty(&g, None).is_err());
    }
}
