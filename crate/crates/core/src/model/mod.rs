//! The transformer channel estimator.
//!
//! Data flow for a batch of `B` LS estimates on an `M = S²` antenna array:
//!
//! ```text
//! [B,S,S,2] --conv--> [B,M,F] --2x attention block--> [B,M,F] --proj + pos--> [B,M,d]
//!   --decoder stack + ln_f--> [B,M,d] --fc--> [B,S,S,F] --3 convs--> noise [B,S,S,2]
//! output = input − noise
//! ```
//!
//! Parameter counts follow from [`layout`]. Per attention block:
//! feature attention `4·I·F²`, spatial attention `4·I·M·d_s`, fusion
//! `2F² + F`, two layer norms `4F` and the FFN `2·mult·F² + (mult+1)·F`.
//! Each decoder layer has [`backbone_layer_params`]`(d) = 12d² + 13d`.
//! At `d = 768`, ten frozen layers hold 70.88M parameters; a GPT-2
//! checkpoint additionally carries a `50257 × 768` token table (38.6M) that
//! this model never reads, which brings the frozen total to about 109.5M.

mod config;
mod forward;
mod params;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    backbone_forward, backbone_layers, embed, feature_attention, forward, forward_batch, forward_graph, from_grid, noise_head, pfsa_block,
    postprocess, preprocess, spatial_attention, to_grid,
};
pub use params::{
    backbone_layer_params, freeze_partition, layout, param_count, Bound, Init, ModelParams, ParamReport, ParamSpec, Parameter, GPT2_VOCAB,
    POST_CONV_FILTERS,
};
pub use weights::{load_weights, read_weights, save_weights, write_weights};

#[cfg(test)]
mod tests;
