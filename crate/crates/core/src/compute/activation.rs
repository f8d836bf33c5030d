use super::{Scalar, Tensor};
use crate::{Error, Result};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Masks `grad_out` where the forward input (equivalently, output) was
/// not positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, forward: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != forward.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: forward.shape().to_vec(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(forward.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape(), data)
}
