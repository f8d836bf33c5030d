//! Dense tensors, differentiable kernels and the SGD optimizer.
//!
//! All kernels are generic over [`Scalar`]; training runs in `f32` and the
//! gradient-check tests run the same code in `f64`.

mod activation;
mod batchnorm;
mod conv;
mod gemm;
mod linear;
mod loss;
mod optim;
mod pool;
mod tensor;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size};
pub use linear::{linear_backward, linear_forward};
pub use loss::softmax_cross_entropy;
pub use optim::{sgd_update, OptimizerState, SgdConfig};
pub use pool::{global_avgpool_backward, global_avgpool_forward};
pub use tensor::{Scalar, Tensor};
