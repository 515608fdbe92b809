//! Backbones, the linear head, losses and parameter persistence.

mod arch;
mod checkpoint;
mod loss;
mod params;

pub use arch::{forward_linear_head, Activation, Architecture, LayerSpec, HEAD_BIAS, HEAD_WEIGHT};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use loss::{cross_entropy, cross_entropy_per_example, kl_divergence, one_hot};
pub use params::{Param, ParamVars, ParameterSet, Scope};
