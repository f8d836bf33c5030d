use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// `y = x·Wᵀ + b` for `x: B×in`, `W: out×in`, `b: out`.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, in_f) = input.dims2()?;
    let (out_f, w_in) = weight.dims2()?;
    if w_in != in_f || bias.shape() != [out_f] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(batch * out_f);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm_nt(batch, out_f, in_f, input.data(), weight.data(), &mut out);
    Tensor::new(&[batch, out_f], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, in_f) = input.dims2()?;
    let (out_f, w_in) = weight.dims2()?;
    if w_in != in_f || grad_out.shape() != [batch, out_f] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![batch, out_f],
        });
    }
    let mut gx = vec![T::zero(); batch * in_f];
    gemm_nn(batch, in_f, out_f, grad_out.data(), weight.data(), &mut gx);
    let mut gw = vec![T::zero(); out_f * in_f];
    gemm_tn(out_f, in_f, batch, grad_out.data(), input.data(), &mut gw);
    let mut gb = vec![T::zero(); out_f];
    for row in grad_out.data().chunks(out_f) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::new(&[batch, in_f], gx)?,
        Tensor::new(&[out_f, in_f], gw)?,
        Tensor::new(&[out_f], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_through() {
        let x = Tensor::<f32>::new(&[2, 3], vec![1., -2., 3., 4., 5., -6.]).unwrap();
        let mut w = Tensor::<f32>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        assert!(linear_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }
}
