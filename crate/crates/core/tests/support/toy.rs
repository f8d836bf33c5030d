//! Random small networks and valid masks.

use masksparsity::compute::Tensor;
use masksparsity::mask::{resolve_constraints, ChannelMask, Provenance};
use masksparsity::model::{build_plain_cnn, build_resnet_cifar, ModelGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A plain CNN or a ResNet-8 with randomized BN parameters and statistics,
/// so that eval-mode outputs depend on every channel.
pub fn random_graph(seed: u64) -> ModelGraph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut g = if r.random_bool(0.3) {
        build_resnet_cifar(1, r.random_range(2..=5), &mut r).unwrap()
    } else {
        let depth = r.random_range(1..=3);
        let widths: Vec<usize> = (0..depth).map(|_| r.random_range(1..=6)).collect();
        build_plain_cnn(&widths, r.random_range(2..=5), &mut r).unwrap()
    };
    for l in g.bn_layers() {
        let s = g.bn_mut(l).unwrap();
        for c in 0..s.channels() {
            s.gamma[c] = r.random_range(-1.5..1.5);
            s.beta[c] = r.random_range(-0.5..0.5);
            s.running_mean[c] = r.random_range(-0.3..0.3);
            s.running_var[c] = r.random_range(0.5..1.5);
        }
    }
    g
}

/// A raw random mask with marking probability `p`, then resolved.
pub fn random_mask(g: &ModelGraph, seed: u64, p: f64) -> ChannelMask {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let raw = ChannelMask::from_fn(g, Provenance::Imported, |_, _| r.random_bool(p));
    resolve_constraints(&raw, g).unwrap()
}

pub fn probes(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
