//! Model zoo: configurations, widening presets, the compiled plan and the
//! assembled DeepMoE network.

mod config;
mod infer;
mod net;
mod plan;
pub mod presets;

pub use config::{widen_channels, Backbone, LayerItem, ModelConfig, PoolMarker, StageConfig, POOL};
pub use infer::{InferenceOutput, DEFAULT_INFERENCE_BATCH};
pub use net::{
    build_deepmoe, gated_basic_block_forward, gated_bottleneck_forward, DeepMoe, ForwardOptions, ForwardOutput,
    GateSource, NormMode,
};
pub use plan::{compile, BlockKind, BlockPlan, ConvLayer, LinearLayer, ModelPlan, PlanItem};
pub use presets::WideningPreset;
