//! Sparse regularization of BN scaling factors and filter weights, plus
//! the scaling-factor telemetry used to inspect its effect.

mod penalty;
mod telemetry;

pub use penalty::{
    global_penalty, group_lasso_penalty, masked_penalty, GammaPenalty, Norm, Penalty, SparsityConfig,
    SparsityMode, WeightPenalty,
};
pub use telemetry::{
    bimodality_index, gamma_histogram, GammaSnapshot, GradientNormLog, Histogram, HistogramRecord,
    LayerGammas, TrackedChannel,
};
