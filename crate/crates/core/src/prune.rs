//! Structural channel removal, equivalence verification and reporting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::compute::{Scalar, Tensor};
use crate::mask::ChannelMask;
use crate::model::{flops_count, param_count, LayerKind, LayerParams, ModelGraph};
use crate::Result;

/// Default bound on the logit deviation accepted by [`equivalence_check`].
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// Physically removes every channel marked in `mask`.
///
/// The mask is validated first, so a malformed mask leaves nothing half
/// done. Convolution rows follow the mask of the BN that normalizes them;
/// convolution input slices and classifier columns follow the BN that
/// governs their input. Running statistics of kept channels are carried
/// over unchanged.
pub fn apply_surgery<T: Scalar>(graph: &ModelGraph<T>, mask: &ChannelMask) -> Result<ModelGraph<T>> {
    mask.validate(graph)?;
    let keep_of = |bn: Option<usize>, full: usize| -> Vec<usize> {
        match bn.and_then(|b| mask.layer(b)) {
            Some(m) => m.kept_indices(),
            None => (0..full).collect(),
        }
    };
    let channels = graph.output_channels();
    let mut layers = graph.layers().to_vec();
    let mut params = Vec::with_capacity(layers.len());
    for (i, (spec, p)) in layers.iter_mut().zip(graph.params()).enumerate() {
        let new_params = match (&mut spec.kind, p) {
            (
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                },
                LayerParams::Conv { weight },
            ) => {
                let src = spec.inputs[0];
                let keep_in = keep_of(graph.channel_source(src), channels[src]);
                let keep_out = keep_of(Some(i + 1), *out_channels);
                *in_channels = keep_in.len();
                *out_channels = keep_out.len();
                LayerParams::Conv {
                    weight: weight.select(0, &keep_out)?.select(1, &keep_in)?,
                }
            }
            (LayerKind::Bn { channels: c }, LayerParams::Bn(state)) => {
                let keep = keep_of(Some(i), *c);
                *c = keep.len();
                LayerParams::Bn(state.select(&keep))
            }
            (LayerKind::Linear { in_features, .. }, LayerParams::Linear { weight, bias }) => {
                let src = spec.inputs[0];
                let keep = keep_of(graph.channel_source(src), channels[src]);
                *in_features = keep.len();
                LayerParams::Linear {
                    weight: weight.select(1, &keep)?,
                    bias: bias.clone(),
                }
            }
            (_, p) => p.clone(),
        };
        params.push(new_params);
    }
    ModelGraph::new(layers, params)
}

/// Copy of `graph` with γ of every pruned channel set to zero, and β too
/// when `zero_beta` is set. With both zeroed a pruned channel outputs an
/// exact zero in eval mode, so the copy computes what the pruned network
/// computes.
pub fn zeroed_reference<T: Scalar>(graph: &ModelGraph<T>, mask: &ChannelMask, zero_beta: bool) -> Result<ModelGraph<T>> {
    mask.check_shape(graph)?;
    let mut reference = graph.clone();
    for m in &mask.layers {
        let state = reference.bn_mut(m.layer).expect("mask layers are BN layers");
        for c in m.pruned_indices() {
            state.gamma[c] = T::zero();
            if zero_beta {
                state.beta[c] = T::zero();
            }
        }
    }
    Ok(reference)
}

/// Outcome of [`equivalence_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub tol: f64,
}

impl Equivalence {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < self.tol
    }
}

/// Runs the zeroed reference and the surgically pruned model in eval mode on
/// `probes` and reports the largest absolute logit difference.
pub fn equivalence_check<T: Scalar>(graph: &ModelGraph<T>, mask: &ChannelMask, probes: &Tensor<T>, tol: f64) -> Result<Equivalence> {
    let reference = zeroed_reference(graph, mask, true)?;
    let pruned = apply_surgery(graph, mask)?;
    logit_gap(&reference, &pruned, probes, tol)
}

/// Largest absolute eval-mode logit difference between two models.
pub fn logit_gap<T: Scalar>(a: &ModelGraph<T>, b: &ModelGraph<T>, probes: &Tensor<T>, tol: f64) -> Result<Equivalence> {
    let la = a.predict(probes)?;
    let lb = b.predict(probes)?;
    Ok(Equivalence {
        max_abs_diff: la.max_abs_diff(&lb)?.as_f64(),
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub before: usize,
    pub after: usize,
}

/// Before/after accounting of a pruning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub input_hw: (usize, usize),
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    /// Percent reductions, rounded to two decimals.
    pub flops_reduction: f64,
    pub params_reduction: f64,
    /// Channel counts of every BN layer present in either model.
    pub layers: Vec<LayerCount>,
}

fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    round2(100.0 * (before as f64 - after as f64) / before as f64)
}

/// Rounds to two decimal places.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Formats a percentage the way the tables print it, e.g. `54.88`.
pub fn format_pct(x: f64) -> String {
    format!("{x:.2}")
}

pub fn report<T: Scalar>(before: &ModelGraph<T>, after: &ModelGraph<T>, input_hw: (usize, usize)) -> Result<PruneReport> {
    let flops_before = flops_count(before, input_hw)?;
    let flops_after = flops_count(after, input_hw)?;
    let params_before = param_count(before);
    let params_after = param_count(after);
    let b = before.bn_channel_table();
    let a = after.bn_channel_table();
    let mut layers: Vec<LayerCount> = before
        .bn_layers()
        .into_iter()
        .map(|l| {
            let name = before.layers()[l].name.clone();
            LayerCount {
                before: b[&name],
                after: a.get(&name).copied().unwrap_or(0),
                name,
            }
        })
        .collect();
    for (name, &n) in &a {
        if !b.contains_key(name) {
            layers.push(LayerCount {
                name: name.clone(),
                before: 0,
                after: n,
            });
        }
    }
    Ok(PruneReport {
        input_hw,
        flops_before,
        flops_after,
        params_before,
        params_after,
        flops_reduction: reduction_pct(flops_before, flops_after),
        params_reduction: reduction_pct(params_before, params_after),
        layers,
    })
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "FLOPs  {} -> {}  (-{}%)",
            self.flops_before,
            self.flops_after,
            format_pct(self.flops_reduction)
        )?;
        writeln!(
            f,
            "params {} -> {}  (-{}%)",
            self.params_before,
            self.params_after,
            format_pct(self.params_reduction)
        )?;
        for l in &self.layers {
            writeln!(f, "  {:<28} {:>5} / {}", l.name, l.after, l.before)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{uniform_mask, Provenance};
    use crate::model::{build_plain_cnn, build_resnet_cifar, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probes(n: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn randomize_bn(g: &mut ModelGraph, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in g.bn_layers() {
            let s = g.bn_mut(l).unwrap();
            let n = s.channels();
            s.gamma = Tensor::<f32>::randn(&[n], 1.0, &mut rng).into_data();
            s.beta = Tensor::<f32>::randn(&[n], 0.5, &mut rng).into_data();
            s.running_mean = Tensor::<f32>::randn(&[n], 0.3, &mut rng).into_data();
            s.running_var = Tensor::<f32>::uniform(&[n], 0.5, &mut rng)
                .map(|v| v + 1.0)
                .into_data();
        }
    }

    #[test]
    fn keep_all_is_a_no_op() {
        let g = build_resnet_cifar(1, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = apply_surgery(&g, &ChannelMask::keep_all(&g)).unwrap();
        assert_eq!(p, g);
        let x = probes(2, 3);
        assert_eq!(p.predict(&x).unwrap(), g.predict(&x).unwrap());
        let r = report(&g, &p, (8, 8)).unwrap();
        assert_eq!(format_pct(r.flops_reduction), "0.00");
        assert_eq!(format_pct(r.params_reduction), "0.00");
    }

    #[test]
    fn two_conv_toy_shapes_and_flops() {
        let g = build_plain_cnn(&[2, 3], 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bn0 = g.bn_layers()[0];
        let mask = ChannelMask::from_fn(&g, Provenance::Imported, |l, c| l == bn0 && c == 1);
        let p = apply_surgery(&g, &mask).unwrap();
        let convs: Vec<&[usize]> = p
            .params()
            .iter()
            .filter_map(|q| match q {
                LayerParams::Conv { weight } => Some(weight.shape()),
                _ => None,
            })
            .collect();
        assert_eq!(convs[0], [1, 3, 3, 3]);
        assert_eq!(convs[1], [3, 1, 3, 3]);
        // conv0 at stride 1 on 8×8, conv1 at stride 2 → 4×4, head 3→4.
        let hand = 9 * 3 * 1 * 64 + 9 * 1 * 3 * 16 + 3 * 4;
        assert_eq!(flops_count(&p, (8, 8)).unwrap(), hand as u64);
    }

    #[test]
    fn halving_single_conv_cuts_three_quarters() {
        let layers = vec![
            LayerSpec::new("in", LayerKind::Input { channels: 4 }, vec![]),
            LayerSpec::new(
                "a.conv",
                LayerKind::Conv {
                    in_channels: 4,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                vec![0],
            ),
            LayerSpec::new("a.bn", LayerKind::Bn { channels: 8 }, vec![1]),
            LayerSpec::new(
                "b.conv",
                LayerKind::Conv {
                    in_channels: 8,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                vec![2],
            ),
            LayerSpec::new("b.bn", LayerKind::Bn { channels: 8 }, vec![3]),
            LayerSpec::new("pool", LayerKind::Avgpool, vec![4]),
            LayerSpec::new(
                "fc",
                LayerKind::Linear {
                    in_features: 8,
                    out_features: 2,
                },
                vec![5],
            ),
        ];
        let g: ModelGraph = ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = apply_surgery(&g, &uniform_mask(&g, 0.5).unwrap()).unwrap();
        let conv_b = |m: &ModelGraph| {
            let shapes = crate::model::layer_shapes(m.layers(), (8, 8)).unwrap();
            match m.layers()[3].kind {
                LayerKind::Conv { in_channels, .. } => 9 * in_channels * shapes[3].0 * 64,
                _ => unreachable!(),
            }
        };
        assert_eq!(conv_b(&g), 4 * conv_b(&p));
    }

    #[test]
    fn resnet_random_mask_matches_zeroed_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = build_resnet_cifar(1, 10, &mut rng).unwrap();
        randomize_bn(&mut g, 6);
        let raw = ChannelMask::from_fn(&g, Provenance::Imported, |l, c| (l * 7 + c * 3) % 5 < 2);
        let mask = crate::mask::resolve_constraints(&raw, &g).unwrap();
        let eq = equivalence_check(&g, &mask, &probes(16, 7), EQUIVALENCE_TOLERANCE).unwrap();
        assert!(eq.passed(), "{eq:?}");
        assert!(mask.pruned_channels() > 0);
    }

    #[test]
    fn leaving_beta_breaks_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = build_plain_cnn(&[4, 4], 3, &mut rng).unwrap();
        randomize_bn(&mut g, 9);
        let bn0 = g.bn_layers()[0];
        g.bn_mut(bn0).unwrap().beta[2] = 1.5;
        let mask = ChannelMask::from_fn(&g, Provenance::Imported, |l, c| l == bn0 && c == 2);
        let leaky = zeroed_reference(&g, &mask, false).unwrap();
        let pruned = apply_surgery(&g, &mask).unwrap();
        let gap = logit_gap(&leaky, &pruned, &probes(4, 10), EQUIVALENCE_TOLERANCE).unwrap();
        assert!(gap.max_abs_diff > 0.0);
    }

    #[test]
    fn malformed_mask_is_rejected() {
        let g = build_plain_cnn(&[2], 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(apply_surgery(&g, &ChannelMask::prune_all_raw(&g)).is_err());
        let mut short = ChannelMask::keep_all(&g);
        short.layers[0].prune.pop();
        assert!(apply_surgery(&g, &short).is_err());
    }

    #[test]
    fn report_formatting() {
        assert_eq!(format_pct(reduction_pct(10000, 4512)), "54.88");
        assert_eq!(round2(12.345_678), 12.35);
    }
}
