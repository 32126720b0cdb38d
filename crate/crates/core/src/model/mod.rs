//! Mesh-regression transformer.
//!
//! The input sequence is `[joint queries | vertex queries | heatmap tokens]`.
//! Three blocks of pre-norm transformer layers attend over the whole sequence,
//! with a learned per-token linear reduction between blocks. A linear head
//! reads 3D coordinates from the query rows, a two-layer perceptron on the
//! mean token state predicts the weak-perspective camera, and the coarse mesh
//! is upsampled to full resolution.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, DESK_HIDDEN, FULL_HIDDEN};
pub use forward::{
    apply_mvm, forward, forward_graph, mvm_mask, read_output, tokens_tensor, upsample_graph, upsample_mesh, ModelOutput,
    ModelVars, ParamVars,
};
pub use params::{
    init_params, init_params_for_body, param_layout, random_tensor, template_upsampler, Init, ParamSpec, Params, INIT_STD,
};
