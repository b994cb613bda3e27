//! Baseline ResNet and the three-expert width-split composite.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AnyModel, Checkpoint, TrainingMeta, CHECKPOINT_VERSION,
};
pub use network::{
    build_baseline, build_composite, build_expert, build_residual_stack, count_params, expert_prefix,
    iq_tensor, Classifier, CompositeModel, Model, ResidualStack,
};
pub use spec::{residual_stack_layers, CompositeSpec, LayerDesc, ModelSpec, ResidualStackConfig};
