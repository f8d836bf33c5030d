//! Sequential versus rayon-parallel kernels. With a single core the two
//! paths should be within noise of each other; the parallel path pays off
//! once the batch is spread over several threads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use masksparsity::compute::{conv2d_backward, conv2d_forward, softmax_cross_entropy, Tensor};
use masksparsity::exec;
use masksparsity::model::build_resnet_cifar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[32, 16, 32, 32], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[16, 16, 3, 3], 0.1, &mut rng);
    let y = conv2d_forward(&x, &w, 1, 1).unwrap();
    let mut group = c.benchmark_group("conv3x3_16ch_32px_batch32");
    for (name, seq) in MODES {
        exec::set_sequential(seq);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv2d_forward(&x, &w, 1, 1).unwrap())
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv2d_backward(&y, &x, &w, 1, 1).unwrap())
        });
    }
    group.finish();
    exec::set_sequential(false);
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = build_resnet_cifar(1, 10, &mut rng).unwrap();
    let x = Tensor::<f32>::randn(&[32, 3, 16, 16], 1.0, &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let mut group = c.benchmark_group("resnet8_forward_backward_batch32");
    group.sample_size(20);
    for (name, seq) in MODES {
        exec::set_sequential(seq);
        group.bench_function(name, |b| {
            b.iter(|| {
                let trace = g.forward(&x, true).unwrap();
                let (_, grad) = softmax_cross_entropy(trace.logits(), &labels).unwrap();
                g.backward(&trace, &grad).unwrap()
            })
        });
    }
    group.finish();
    exec::set_sequential(false);
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
