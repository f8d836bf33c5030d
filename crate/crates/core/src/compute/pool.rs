use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Spatial mean per channel: `B×C×H×W → B×C`.
pub fn global_avgpool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let scale = T::one() / T::from_usize(hw);
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(&[b, c], out)
}

/// Spreads each pooled gradient evenly over its `H×W` plane.
pub fn global_avgpool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [b, c, h, w] = input_shape else {
        return Err(Error::InvalidArgument(format!(
            "avgpool input shape must be NCHW, got {input_shape:?}"
        )));
    };
    if grad_out.shape() != [*b, *c] {
        return Err(Error::ShapeMismatch {
            op: "avgpool_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![*b, *c],
        });
    }
    let hw = h * w;
    let scale = T::one() / T::from_usize(hw);
    let mut out = Vec::with_capacity(b * c * hw);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor::new(input_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_average_to_one() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 2], 1.0);
        let y = global_avgpool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[1.0, 1.0]);
        let g = global_avgpool_backward(&Tensor::full(&[1, 2], 4.0), &[1, 2, 2, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }
}
