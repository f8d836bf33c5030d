//! Batch normalization over the (B, H, W) axes of NCHW activations.

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Variance floor added before the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;

/// Learned affine parameters and running statistics of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    /// Per-channel scaling factors. Their magnitudes drive pruning.
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// γ = 1, β = 0, zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(BN_MOMENTUM),
            epsilon: T::from_f64(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if [self.beta.len(), self.running_mean.len(), self.running_var.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::InvalidArgument(
                "batch-norm vectors have differing lengths".into(),
            ));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        if self.epsilon < T::zero() || !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::InvalidArgument(
                "batch-norm momentum must lie in (0,1) and epsilon must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Keep only the listed channels.
    pub fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &[T]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<_>>();
        BatchNormState {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            momentum: U::from_f64(self.momentum.as_f64()),
            epsilon: U::from_f64(self.epsilon.as_f64()),
        }
    }
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    training: bool,
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

/// Normalize `input`, updating running statistics in training mode.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, h, w) = input.dims4()?;
    if c != state.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: input.shape().to_vec(),
            rhs: vec![state.channels()],
        });
    }
    let hw = h * w;
    let count = b * hw;
    if training && count < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm: training mode needs more than one value per channel".into(),
        ));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut x_hat = if training { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut inv_stds = vec![T::zero(); c];
    let n = T::from_usize(count);

    for ch in 0..c {
        let plane = |bi: usize| (bi * c + ch) * hw;
        let (mean, var) = if training {
            let mut sum = T::zero();
            for bi in 0..b {
                sum = sum + x[plane(bi)..plane(bi) + hw].iter().copied().sum::<T>();
            }
            let mean = sum / n;
            let mut sq = T::zero();
            for bi in 0..b {
                for &v in &x[plane(bi)..plane(bi) + hw] {
                    let d = v - mean;
                    sq = sq + d * d;
                }
            }
            let var = sq / n;
            let unbiased = sq / T::from_usize(count - 1);
            let m = state.momentum;
            state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
            state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
            (mean, var)
        } else {
            (state.running_mean[ch], state.running_var[ch])
        };
        let inv_std = T::one() / (var + state.epsilon).sqrt();
        inv_stds[ch] = inv_std;
        let (g, beta) = (state.gamma[ch], state.beta[ch]);
        for bi in 0..b {
            let p = plane(bi);
            for i in p..p + hw {
                let xh = (x[i] - mean) * inv_std;
                if training {
                    x_hat[i] = xh;
                }
                out[i] = xh * g + beta;
            }
        }
    }
    let cache = BatchNormCache {
        training,
        shape: input.shape().to_vec(),
        x_hat,
        inv_std: inv_stds,
        gamma: state.gamma.clone(),
    };
    Ok((Tensor::new(input.shape(), out)?, cache))
}

/// Adjoint of a training-mode [`batchnorm_forward`], including the
/// dependence of the batch statistics on the input.
/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if !cache.training {
        return Err(Error::InvalidArgument(
            "batchnorm_backward needs a training-mode cache".into(),
        ));
    }
    if grad_out.shape() != cache.shape {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: cache.shape.clone(),
        });
    }
    let (b, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let n = T::from_usize(b * hw);
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); g.len()];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for bi in 0..b {
            let p = (bi * c + ch) * hw;
            for i in p..p + hw {
                sum_g = sum_g + g[i];
                sum_gx = sum_gx + g[i] * cache.x_hat[i];
            }
        }
        grad_beta[ch] = sum_g;
        grad_gamma[ch] = sum_gx;
        // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
        let scale = cache.gamma[ch] * cache.inv_std[ch];
        let mean_g = sum_g / n;
        let mean_gx = sum_gx / n;
        for bi in 0..b {
            let p = (bi * c + ch) * hw;
            for i in p..p + hw {
                grad_in[i] = scale * (g[i] - mean_g - cache.x_hat[i] * mean_gx);
            }
        }
    }
    Ok((Tensor::new(&cache.shape, grad_in)?, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_identity_with_unit_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let mut st = BatchNormState::<f64>::new(3);
        st.epsilon = 0.0;
        let (y, _) = batchnorm_forward(&x, &mut st, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_gamma_gives_constant_beta_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[3, 2, 4, 4], 2.0, &mut rng);
        let mut st = BatchNormState::<f32>::new(2);
        st.gamma[1] = 0.0;
        st.beta[1] = 0.75;
        for training in [true, false] {
            let (y, _) = batchnorm_forward(&x, &mut st, training).unwrap();
            for bi in 0..3 {
                let p = (bi * 2 + 1) * 16;
                assert!(y.data()[p..p + 16].iter().all(|&v| v == 0.75));
            }
        }
    }

    #[test]
    fn training_moments_match_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4, 2, 3, 3], 1.5, &mut rng);
        let mut st = BatchNormState::<f64>::new(2);
        st.gamma = vec![1.7, -0.4];
        st.beta = vec![0.3, -1.2];
        let (y, _) = batchnorm_forward(&x, &mut st, true).unwrap();
        for ch in 0..2 {
            let xs: Vec<f64> = (0..4)
                .flat_map(|b| x.data()[(b * 2 + ch) * 9..(b * 2 + ch) * 9 + 9].to_vec())
                .collect();
            let ys: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 2 + ch) * 9..(b * 2 + ch) * 9 + 9].to_vec())
                .collect();
            let n = xs.len() as f64;
            let xm = xs.iter().sum::<f64>() / n;
            let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            let ym = ys.iter().sum::<f64>() / n;
            let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n;
            assert!((ym - st.beta[ch]).abs() < 1e-10);
            let expected = st.gamma[ch].powi(2) * xv / (xv + BN_EPSILON);
            assert!((yv - expected).abs() < 1e-10, "{yv} vs {expected}");
        }
    }

    #[test]
    fn running_stats_follow_exponential_average() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut st = BatchNormState::<f64>::new(1);
        batchnorm_forward(&x, &mut st, true).unwrap();
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1,3} is 2
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_batches_and_eval_caches() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let mut st = BatchNormState::<f32>::new(2);
        assert!(batchnorm_forward(&x, &mut st, true).is_err());
        let (_, cache) = batchnorm_forward(&x, &mut st, false).unwrap();
        assert!(batchnorm_backward(&x, &cache).is_err());
        let mut st3 = BatchNormState::<f32>::new(3);
        assert!(batchnorm_forward(&x, &mut st3, false).is_err());
    }

    #[test]
    fn grad_beta_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let mut st = BatchNormState::<f64>::new(2);
        let (_, cache) = batchnorm_forward(&x, &mut st, true).unwrap();
        let (_, _, gb) = batchnorm_backward(&g, &cache).unwrap();
        for ch in 0..2 {
            let s: f64 = (0..2)
                .flat_map(|b| g.data()[(b * 2 + ch) * 4..(b * 2 + ch) * 4 + 4].to_vec())
                .sum();
            assert!((gb[ch] - s).abs() < 1e-12);
        }
        let zeros = Tensor::<f64>::zeros(&[2, 2, 2, 2]);
        let (gx, gg, gb) = batchnorm_backward(&zeros, &cache).unwrap();
        assert!(gx.data().iter().chain(&gg).chain(&gb).all(|&v| v == 0.0));
    }
}
