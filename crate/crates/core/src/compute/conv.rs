//! 2-D cross-correlation without bias, lowered to im2col + matrix products.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::exec;
use crate::{Error, Result};

/// Output extent of a convolution along one spatial axis, or `None` when
/// the padded input is smaller than the kernel.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_ch, in_h, in_w) = input.dims4()?;
        let (out_ch, w_in, kh, kw) = weight.dims4()?;
        if w_in != in_ch || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (out_h, out_w) = match (
            conv_output_size(in_h, kh, stride, pad),
            conv_output_size(in_w, kw, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: kernel {kh}×{kw} does not fit input {in_h}×{in_w} with pad {pad}"
                )))
            }
        };
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    /// Source offset (within one sample) for every `(col row, output pixel)`
    /// pair, `None` where the receptive field hits padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let k = self.kernel;
        let hw = self.out_hw();
        for c in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            let col = row * hw + oy * self.out_w + ox;
                            let src = (iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w)
                                .then(|| (c * self.in_h + iy as usize) * self.in_w + ix as usize);
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        self.for_each_tap(|_, col, src| {
            cols[col] = src.map_or(T::zero(), |s| sample[s]);
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        self.for_each_tap(|_, col, src| {
            if let Some(s) = src {
                sample[s] = sample[s] + cols[col];
            }
        });
    }
}

/// Cross-correlate an NCHW `input` with an `N×C×k×k` `weight`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride, pad)?;
    let out_sample = g.out_ch * g.out_hw();
    let mut out = vec![T::zero(); g.batch * out_sample];
    exec::for_each_chunk(&mut out, out_sample, |b, out_b| {
        let sample = &input.data()[b * g.in_sample()..(b + 1) * g.in_sample()];
        let mut cols = vec![T::zero(); g.col_rows() * g.out_hw()];
        g.im2col(sample, &mut cols);
        gemm_nn(g.out_ch, g.out_hw(), g.col_rows(), weight.data(), &cols, out_b);
    });
    Tensor::new(&[g.batch, g.out_ch, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d_forward`]: returns `(grad_input, grad_weight)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Geometry::new(input, weight, stride, pad)?;
    let expected = [g.batch, g.out_ch, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let out_sample = g.out_ch * g.out_hw();
    let w_len = weight.len();

    // Per-sample weight gradients are summed afterwards in sample order so the
    // result does not depend on how samples were scheduled.
    let mut grad_input = vec![T::zero(); input.len()];
    let per_sample = {
        let partial: Vec<(Vec<T>, Vec<T>)> = exec::map_indexed(g.batch, |b| {
            let sample = &input.data()[b * g.in_sample()..(b + 1) * g.in_sample()];
            let gout = &grad_out.data()[b * out_sample..(b + 1) * out_sample];
            let mut cols = vec![T::zero(); g.col_rows() * g.out_hw()];
            g.im2col(sample, &mut cols);
            let mut gw = vec![T::zero(); w_len];
            gemm_nt(g.out_ch, g.col_rows(), g.out_hw(), gout, &cols, &mut gw);
            let mut gcols = vec![T::zero(); cols.len()];
            gemm_tn(g.col_rows(), g.out_hw(), g.out_ch, weight.data(), gout, &mut gcols);
            let mut gin = vec![T::zero(); g.in_sample()];
            g.col2im(&gcols, &mut gin);
            (gin, gw)
        });
        partial
    };
    let mut grad_weight = vec![T::zero(); w_len];
    for (b, (gin, gw)) in per_sample.into_iter().enumerate() {
        grad_input[b * g.in_sample()..(b + 1) * g.in_sample()].copy_from_slice(&gin);
        for (acc, v) in grad_weight.iter_mut().zip(gw) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::new(input.shape(), grad_input)?,
        Tensor::new(weight.shape(), grad_weight)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_receptive_field() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_kernel_is_passthrough() {
        let mut rng = rand::rng();
        let x = Tensor::<f32>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut w = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let err = conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
        let small = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&small, &Tensor::zeros(&[1, 2, 3, 3]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![1.5]).unwrap();
        let w = Tensor::<f64>::new(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let g = Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.25]).unwrap();
        let (gx, gw) = conv2d_backward(&g, &x, &w, 1, 0).unwrap();
        assert_eq!(gx.data(), &[-0.5]);
        assert_eq!(gw.data(), &[0.375]);
    }

    #[test]
    fn zero_adjoint() {
        let mut rng = rand::rng();
        let x = Tensor::<f32>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let g = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
        let (gx, gw) = conv2d_backward(&g, &x, &w, 2, 1).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::<f32>::zeros(&[2, 3, 5, 5]);
        assert!(conv2d_backward(&bad, &x, &w, 2, 1).is_err());
    }
}
