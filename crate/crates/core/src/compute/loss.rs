use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient `(softmax − onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_b = T::one() / T::from_usize(batch);
    let mut grad = vec![T::zero(); batch * classes];
    let mut loss = T::zero();
    for (i, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss = loss + (log_sum - (row[label] - max));
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (k, (&v, gk)) in row.iter().zip(g.iter_mut()).enumerate() {
            let p = (v - max).exp() / sum;
            let target = if k == label { T::one() } else { T::zero() };
            *gk = (p - target) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::new(&[batch, classes], grad)?))
}
