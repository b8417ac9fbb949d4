//! Reusable layers built on the tape: adapters, fusion modules, prompted
//! transformer layers and the classification head.

mod fusion;
mod head;
mod linear;
mod transformer;

pub use fusion::{BioCoupledFusion, DualGatedFusion};
pub use head::ResidualMlpHead;
pub use linear::{uniform_init, LayerNorm, Linear, LoraAdapter, LoraConfig, LoraLinear, Mlp2};
pub use transformer::{
    multi_head_attention, prompt_transformer_layer, zero_padding, BatchLayout, PromptLayer, TransformerLayer,
    MASK_VALUE,
};
