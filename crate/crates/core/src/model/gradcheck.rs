//! Finite-difference check of a whole network's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{LayerKind, ModelGraph};
use crate::compute::{softmax_cross_entropy, Scalar, Tensor};
use crate::{Error, Result};

const STEP: f64 = 1e-6;

/// Worst norm-wise relative error between the analytic gradient of the
/// cross-entropy loss and central differences, in f64, over `coords`
/// randomly sampled parameters. Probes are `batch` random images of
/// `hw` size with random labels; BN runs in training mode.
pub fn gradient_check<T: Scalar>(graph: &ModelGraph<T>, batch: usize, hw: (usize, usize), coords: usize, seed: u64) -> Result<f64> {
    let channels = graph.input_channels();
    let classes = graph
        .layers()
        .iter()
        .rev()
        .find_map(|l| match l.kind {
            LayerKind::Linear { out_features, .. } => Some(out_features),
            _ => None,
        })
        .ok_or_else(|| Error::InvalidGraph("graph has no classifier".into()))?;
    if batch < 2 || coords == 0 {
        return Err(Error::InvalidArgument("gradient check needs batch ≥ 2 and at least one coordinate".into()));
    }
    let g = graph.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn(&[batch, channels, hw.0, hw.1], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let loss = |h: &ModelGraph<f64>| -> Result<f64> {
        let mut h = h.clone();
        let trace = h.forward(&x, true)?;
        Ok(softmax_cross_entropy(trace.logits(), &labels)?.0)
    };
    let mut h = g.clone();
    let trace = h.forward(&x, true)?;
    let (_, grad_logits) = softmax_cross_entropy(trace.logits(), &labels)?;
    let analytic: Vec<f64> = g.backward(&trace, &grad_logits)?.slices().concat();

    let sizes: Vec<usize> = g.param_slices().iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = (0..coords).map(|_| rng.random_range(0..total)).collect();
    let mut numeric = Vec::with_capacity(coords);
    let mut probe = g.clone();
    for &flat in &picks {
        let (mut slice, mut off) = (0, flat);
        while off >= sizes[slice] {
            off -= sizes[slice];
            slice += 1;
        }
        let orig = g.param_slices()[slice][off];
        probe.param_slices_mut()[slice][off] = orig + STEP;
        let up = loss(&probe)?;
        probe.param_slices_mut()[slice][off] = orig - STEP;
        let down = loss(&probe)?;
        probe.param_slices_mut()[slice][off] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    let sampled: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
    let diff = norm(&mut sampled.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut sampled.iter().copied()).max(norm(&mut numeric.iter().copied()));
    Ok(if scale < 1e-12 { diff } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_plain_cnn;

    #[test]
    fn fresh_network_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = build_plain_cnn(&[4, 6], 3, &mut rng).unwrap();
        let err = gradient_check(&g, 3, (6, 6), 40, 1).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
