//! Forward kernels against brute-force loops, in f32. Each check returns
//! the worst deviation `|got − want| / (1 + |want|)` over its instances.

use masksparsity::compute::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;

fn conv_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin + c) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((n * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (vec![b, cout, oh, ow], out)
}

struct Worst(f64);

impl Worst {
    fn check(&mut self, what: &str, seed: u64, got: &Tensor, shape: &[usize], want: &[f64]) {
        if got.shape() != shape {
            eprintln!("{what} (instance {seed}): shape {:?}, expected {shape:?}", got.shape());
            self.0 = f64::INFINITY;
            return;
        }
        for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
            let d = (g as f64 - w).abs() / (1.0 + w.abs());
            if d >= TOL {
                eprintln!("{what} (instance {seed}) element {i}: {g} vs {w}");
            }
            self.0 = self.0.max(d);
        }
    }
}

pub fn conv_matches_six_loop_oracle() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..40 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=3);
        let pad = r.random_range(0..=k / 2);
        let (b, cin, cout) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=6));
        let (h, w) = (r.random_range(k..=9), r.random_range(k..=9));
        let x = Tensor::randn(&[b, cin, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[cout, cin, k, k], 0.5, &mut r);
        let (shape, want) = conv_direct(&x, &wt, stride, pad);
        worst.check("conv", seed, &conv2d_forward(&x, &wt, stride, pad).unwrap(), &shape, &want);
    }
    worst.0
}

pub fn conv_on_a_non_divisible_grid() -> f64 {
    let mut worst = Worst(0.0);
    // 8×8, 3×3, stride 2, pad 1 → 4×4 (floor of 4.5)
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r);
    let wt = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let (shape, want) = conv_direct(&x, &wt, 2, 1);
    assert_eq!(shape, [1, 3, 4, 4]);
    worst.check("conv", 0, &conv2d_forward(&x, &wt, 2, 1).unwrap(), &shape, &want);
    worst.0
}

pub fn linear_matches_loops() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..40 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, i, o) = (r.random_range(1..=6), r.random_range(1..=40), r.random_range(1..=12));
        let x = Tensor::randn(&[b, i], 1.0, &mut r);
        let wt = Tensor::randn(&[o, i], 0.3, &mut r);
        let bias = Tensor::randn(&[o], 1.0, &mut r);
        let mut want = vec![0.0f64; b * o];
        for n in 0..b {
            for j in 0..o {
                want[n * o + j] = bias.data()[j] as f64
                    + (0..i).map(|t| x.data()[n * i + t] as f64 * wt.data()[j * i + t] as f64).sum::<f64>();
            }
        }
        worst.check("linear", seed, &linear_forward(&x, &wt, &bias).unwrap(), &[b, o], &want);
    }
    worst.0
}

pub fn avgpool_matches_loops() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..40 {
        let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
        let (b, c, h, w) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=9), r.random_range(1..=9));
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut r);
        let want: Vec<f64> = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
            .collect();
        worst.check("avgpool", seed, &global_avgpool_forward(&x).unwrap(), &[b, c], &want);
    }
    worst.0
}

pub fn softmax_cross_entropy_matches_loops() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..40 {
        let mut r = ChaCha8Rng::seed_from_u64(300 + seed);
        let (b, k) = (r.random_range(1..=8), r.random_range(2..=10));
        let logits = Tensor::randn(&[b, k], 4.0, &mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let mut loss = 0.0f64;
        let mut grad = vec![0.0f64; b * k];
        for n in 0..b {
            let row: Vec<f64> = logits.data()[n * k..(n + 1) * k].iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            loss += z.ln() - row[labels[n]];
            for j in 0..k {
                grad[n * k + j] = (row[j].exp() / z - if j == labels[n] { 1.0 } else { 0.0 }) / b as f64;
            }
        }
        loss /= b as f64;
        let (got, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        worst.0 = worst.0.max(((got as f64) - loss).abs() / (1.0 + loss.abs()));
        worst.check("softmax gradient", seed, &g, &[b, k], &grad);
    }
    worst.0
}

pub fn softmax_is_stable_for_large_logits() -> f64 {
    let mut worst = Worst(0.0);
    let logits = Tensor::new(&[1, 3], vec![1000.0f32, 0.0, -1000.0]).unwrap();
    let (loss, g) = softmax_cross_entropy(&logits, &[0]).unwrap();
    if !(loss.is_finite() && g.data().iter().all(|v| v.is_finite())) {
        return f64::INFINITY;
    }
    worst.0 = (loss as f64).abs();
    worst.0
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("conv", conv_matches_six_loop_oracle()),
        ("conv_non_divisible", conv_on_a_non_divisible_grid()),
        ("linear", linear_matches_loops()),
        ("avgpool", avgpool_matches_loops()),
        ("softmax_cross_entropy", softmax_cross_entropy_matches_loops()),
        ("softmax_large_logits", softmax_is_stable_for_large_logits()),
    ]
}
