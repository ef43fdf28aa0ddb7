//! The shared vision-transformer encoder.

mod attention;
mod config;
mod model;
mod params;

pub use attention::AttentionStack;
pub use config::{selection_count, tokens_per_side, BoxMode, Branch, FusionMode, ModelConfig};
pub use model::{
    branch_on_tape, capture_attention, classify_on_tape, embed_on_tape, encode_on_tape, patchify,
    BranchGraph, BranchOutput, Vit, LAYER_NORM_EPS,
};
pub use params::{truncated_normal, BranchParams, EncoderParams, LayerParams, INIT_STD};

#[cfg(test)]
mod tests;
