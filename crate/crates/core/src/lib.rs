//! Pruning-aware sparse regularization for structured channel pruning.
//!
//! The crate trains small convolutional networks from scratch, pushes the
//! batch-norm scaling factors of selected channels toward zero, generates
//! pruning masks from those factors, physically removes the channels and
//! fine-tunes the compact model. Every stage is instrumented with FLOPs and
//! parameter accounting and with scaling-factor telemetry.
//!
//! Module map:
//!
//! * [`compute`]: tensors, forward/backward kernels and SGD.
//! * [`model`]: layer graphs, network builders, accounting and checkpoints.
//! * [`data`]: CIFAR-10 binary loader, synthetic data and batching.
//! * [`sparsity`]: global, masked and group-lasso penalties plus telemetry.
//! * [`mask`]: pruning-mask generation, coupling resolution and persistence.
//! * [`prune`]: channel surgery, equivalence checking and reports.
//! * [`pipeline`]: stage orchestration, templates and run comparison.

pub mod compute;
pub mod data;
mod error;
pub mod exec;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod sparsity;

pub use error::{Error, Result};
