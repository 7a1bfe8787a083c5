//! Ventricle segmentation networks, their loss and Monte-Carlo dropout.

mod loss;
mod network;
mod uncertainty;

pub use loss::{weighted_ce, DEFAULT_FG_WEIGHT, EPS};
pub use network::{
    dropout_mask, features_graph, head_graph, seg_forward, seg_graph, Attention, SegArch, SegConfig, SegModel,
};
pub use uncertainty::{
    mc_predict, mean_and_variance, pass_seed, slice_uncertainty, PredictionBundle, SliceUncertainty, DEFAULT_PASSES,
    DEFAULT_THRESHOLD,
};
