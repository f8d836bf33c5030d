//! Central finite differences against every backward pass, in f64. Each
//! check returns the worst relative error over its random instances.

use masksparsity::compute::*;
use masksparsity::mask::{ChannelMask, Provenance};
use masksparsity::model::{build_plain_cnn, build_resnet_cifar, ModelGraph};
use masksparsity::sparsity::{global_penalty, group_lasso_penalty, masked_penalty, Norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-5;
const H: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, optionally only at `coords`.
fn numeric(x: &[f64], coords: Option<&[usize]>, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

struct Worst(f64);

impl Worst {
    fn check(&mut self, what: &str, seed: u64, analytic: &[f64], numeric: &[f64]) {
        let e = rel_err(analytic, numeric);
        if e >= TOL {
            eprintln!("{what} (instance {seed}): relative error {e:e}");
        }
        self.0 = self.0.max(e);
    }
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), data.to_vec()).unwrap()
}

pub fn conv2d() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let kernel = if r.random_bool(0.5) { 3 } else { 1 };
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=kernel / 2 + 1);
        let (b, cin, cout) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(kernel..=6), r.random_range(kernel..=6));
        let x = randn(&[b, cin, h, w], &mut r);
        let wt = randn(&[cout, cin, kernel, kernel], &mut r);
        let y = conv2d_forward(&x, &wt, stride, pad).unwrap();
        let proj = randn(y.shape(), &mut r);
        let (gx, gw) = conv2d_backward(&proj, &x, &wt, stride, pad).unwrap();
        let nx = numeric(x.data(), None, |d| {
            dot(conv2d_forward(&with_data(&x, d), &wt, stride, pad).unwrap().data(), proj.data())
        });
        let nw = numeric(wt.data(), None, |d| {
            dot(conv2d_forward(&x, &with_data(&wt, d), stride, pad).unwrap().data(), proj.data())
        });
        worst.check("conv input", seed, gx.data(), &nx);
        worst.check("conv weight", seed, gw.data(), &nw);
    }
    worst.0
}

pub fn batchnorm_training() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (b, c) = (r.random_range(2..=4), r.random_range(1..=3));
        let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
        let x = randn(&[b, c, h, w], &mut r);
        let mut state = BatchNormState::<f64>::new(c);
        state.gamma = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
        state.beta = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = state.clone();
        let (y, cache) = batchnorm_forward(&x, &mut state.clone(), true).unwrap();
        let proj = randn(y.shape(), &mut r);
        let (gx, gg, gb) = batchnorm_backward(&proj, &cache).unwrap();
        let eval = |x: &Tensor<f64>, s: &BatchNormState<f64>| {
            dot(batchnorm_forward(x, &mut s.clone(), true).unwrap().0.data(), proj.data())
        };
        let nx = numeric(x.data(), None, |d| eval(&with_data(&x, d), &base));
        let ng = numeric(&base.gamma, None, |d| {
            let mut s = base.clone();
            s.gamma = d.to_vec();
            eval(&x, &s)
        });
        let nb = numeric(&base.beta, None, |d| {
            let mut s = base.clone();
            s.beta = d.to_vec();
            eval(&x, &s)
        });
        worst.check("bn input", seed, gx.data(), &nx);
        worst.check("bn gamma", seed, &gg, &ng);
        worst.check("bn beta", seed, &gb, &nb);
    }
    worst.0
}

pub fn linear() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (b, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
        let x = randn(&[b, i], &mut r);
        let wt = randn(&[o, i], &mut r);
        let bias = randn(&[o], &mut r);
        let proj = randn(&[b, o], &mut r);
        let (gx, gw, gb) = linear_backward(&proj, &x, &wt).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, bb: &Tensor<f64>| dot(linear_forward(x, w, bb).unwrap().data(), proj.data());
        worst.check("linear input", seed, gx.data(), &numeric(x.data(), None, |d| f(&with_data(&x, d), &wt, &bias)));
        worst.check("linear weight", seed, gw.data(), &numeric(wt.data(), None, |d| f(&x, &with_data(&wt, d), &bias)));
        worst.check("linear bias", seed, gb.data(), &numeric(bias.data(), None, |d| f(&x, &wt, &with_data(&bias, d))));
    }
    worst.0
}

pub fn global_avgpool() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let shape = [r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5)];
        let x = randn(&shape, &mut r);
        let proj = randn(&shape[..2], &mut r);
        let gx = global_avgpool_backward(&proj, &shape).unwrap();
        let nx = numeric(x.data(), None, |d| dot(global_avgpool_forward(&with_data(&x, d)).unwrap().data(), proj.data()));
        worst.check("avgpool", seed, gx.data(), &nx);
    }
    worst.0
}

pub fn relu() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let shape = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
        // keep inputs away from the kink at zero
        let x = randn(&shape, &mut r).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
        let proj = randn(&shape, &mut r);
        let gx = relu_backward(&proj, &relu_forward(&x)).unwrap();
        let nx = numeric(x.data(), None, |d| dot(relu_forward(&with_data(&x, d)).data(), proj.data()));
        worst.check("relu", seed, gx.data(), &nx);
    }
    worst.0
}

pub fn softmax_cross_entropy_loss() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (b, k) = (r.random_range(1..=5), r.random_range(2..=6));
        let logits = Tensor::<f64>::randn(&[b, k], 3.0, &mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let n = numeric(logits.data(), None, |d| softmax_cross_entropy(&with_data(&logits, d), &labels).unwrap().0);
        worst.check("softmax cross-entropy", seed, g.data(), &n);
    }
    worst.0
}

fn toy_graph(seed: u64) -> ModelGraph<f64> {
    let mut r = rng(seed);
    let widths = [r.random_range(2..=5), r.random_range(2..=5)];
    let mut g = build_plain_cnn(&widths, 3, &mut r).unwrap().cast::<f64>();
    for l in g.bn_layers() {
        let s = g.bn_mut(l).unwrap();
        for v in s.gamma.iter_mut() {
            // away from the L1 kink
            let m: f64 = r.random_range(0.1..2.0);
            *v = if r.random_bool(0.5) { m } else { -m };
        }
    }
    g
}

fn gammas(g: &ModelGraph<f64>) -> Vec<f64> {
    g.bn_layers().into_iter().flat_map(|l| g.bn(l).unwrap().gamma.clone()).collect()
}

fn set_gammas(g: &mut ModelGraph<f64>, v: &[f64]) {
    let mut it = v.iter();
    for l in g.bn_layers() {
        for x in g.bn_mut(l).unwrap().gamma.iter_mut() {
            *x = *it.next().unwrap();
        }
    }
}

pub fn gamma_penalties() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let g = toy_graph(600 + seed);
        let mut r = rng(700 + seed);
        let mask = ChannelMask::from_fn(&g, Provenance::Imported, |_, _| r.random_bool(0.5));
        let x0 = gammas(&g);
        for norm in [Norm::L1, Norm::L2] {
            let analytic: Vec<f64> = global_penalty(&g, 1e-2, norm).unwrap().grads.into_iter().flat_map(|(_, v)| v).collect();
            let n = numeric(&x0, None, |d| {
                let mut h = g.clone();
                set_gammas(&mut h, d);
                global_penalty(&h, 1e-2, norm).unwrap().loss
            });
            worst.check("global penalty", seed, &analytic, &n);
            let analytic: Vec<f64> = masked_penalty(&g, &mask, 1e-2, norm).unwrap().grads.into_iter().flat_map(|(_, v)| v).collect();
            let n = numeric(&x0, None, |d| {
                let mut h = g.clone();
                set_gammas(&mut h, d);
                masked_penalty(&h, &mask, 1e-2, norm).unwrap().loss
            });
            worst.check("masked penalty", seed, &analytic, &n);
        }
    }
    worst.0
}

pub fn group_lasso() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let g = toy_graph(800 + seed);
        let p = group_lasso_penalty(&g, 1e-2);
        for (layer, grad) in &p.grads {
            let idx = g.params()[..*layer].iter().map(|q| q_slices(q)).sum::<usize>();
            let x0 = g.param_slices()[idx].to_vec();
            let n = numeric(&x0, None, |d| {
                let mut h = g.clone();
                h.param_slices_mut()[idx].copy_from_slice(d);
                group_lasso_penalty(&h, 1e-2).loss
            });
            worst.check("group lasso", seed, grad.data(), &n);
        }
    }
    worst.0
}

fn q_slices(p: &masksparsity::model::LayerParams<f64>) -> usize {
    use masksparsity::model::LayerParams;
    match p {
        LayerParams::None => 0,
        LayerParams::Conv { .. } => 1,
        LayerParams::Bn(_) | LayerParams::Linear { .. } => 2,
    }
}

fn model_loss(g: &ModelGraph<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut h = g.clone();
    let trace = h.forward(x, true).unwrap();
    softmax_cross_entropy(trace.logits(), labels).unwrap().0
}

fn check_model(worst: &mut Worst, what: &str, seed: u64, g: &ModelGraph<f64>, x: &Tensor<f64>, labels: &[usize], sample: Option<usize>) {
    let mut h = g.clone();
    let trace = h.forward(x, true).unwrap();
    let (_, gl) = softmax_cross_entropy(trace.logits(), labels).unwrap();
    let grads = g.backward(&trace, &gl).unwrap();
    let analytic: Vec<f64> = grads.slices().concat();
    let flat: Vec<f64> = g.param_slices().concat();
    let mut r = rng(seed ^ 0xabc);
    let coords: Option<Vec<usize>> = sample.map(|k| (0..k).map(|_| r.random_range(0..flat.len())).collect());
    let unflatten = |d: &[f64]| {
        let mut h = g.clone();
        let mut off = 0;
        for s in h.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&d[off..off + n]);
            off += n;
        }
        h
    };
    let n = numeric(&flat, coords.as_deref(), |d| model_loss(&unflatten(d), x, labels));
    let a: Vec<f64> = match &coords {
        Some(c) => c.iter().map(|&i| analytic[i]).collect(),
        None => analytic,
    };
    worst.check(what, seed, &a, &n);
}

pub fn plain_network_end_to_end() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let g = toy_graph(900 + seed);
        let mut r = rng(950 + seed);
        let x = randn(&[3, 3, 6, 6], &mut r);
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
        check_model(&mut worst, "plain network", seed, &g, &x, &labels, None);
    }
    worst.0
}

pub fn residual_network_end_to_end() -> f64 {
    let mut worst = Worst(0.0);
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let g = build_resnet_cifar(1, 4, &mut r).unwrap().cast::<f64>();
        let x = randn(&[2, 3, 4, 4], &mut r);
        let labels = vec![r.random_range(0..4), r.random_range(0..4)];
        check_model(&mut worst, "resnet", seed, &g, &x, &labels, Some(60));
    }
    worst.0
}

/// Every check, by name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d()),
        ("batchnorm", batchnorm_training()),
        ("linear", linear()),
        ("global_avgpool", global_avgpool()),
        ("relu", relu()),
        ("softmax_cross_entropy", softmax_cross_entropy_loss()),
        ("gamma_penalties", gamma_penalties()),
        ("group_lasso", group_lasso()),
        ("plain_network", plain_network_end_to_end()),
        ("residual_network", residual_network_end_to_end()),
    ]
}
