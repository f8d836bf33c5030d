//! Layer graphs, network builders, FLOPs/parameter accounting and the
//! checkpoint container.

mod accounting;
mod builders;
mod checkpoint;
mod graph;
mod gradcheck;
mod train;

pub use accounting::{flops_count, layer_shapes, param_count};
pub use builders::{
    build_plain_cnn, build_resnet_cifar, plain_cnn_specs, resnet_cifar_specs, weighted_depth,
    Architecture,
};
pub use checkpoint::{
    load_model, read_container, save_model, write_container, ContainerKind, Manifest, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use gradcheck::gradient_check;
pub use graph::{LayerKind, LayerParams, LayerSpec, ModelGraph};
pub use train::{Gradients, LayerGrads, Trace};
