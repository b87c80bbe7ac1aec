//! Toy trainable backbone: strided conv feature encoder, one-hot language
//! input, input projection, chunk-masked attention blocks and a decoder
//! projection to vocabulary log-posteriors. Gradients are hand-derived.

pub mod checkpoint;
mod config;
pub mod layers;
mod model;
mod params;

pub use checkpoint::{check_shapes, CheckpointMeta, Container, ModelCheckpoint};
pub use config::ModelConfig;
pub use model::{Encoder, Forward};
pub use params::{
    expected_shapes, is_encoder_tensor, names, select_trainable, LayerSelection, Parameters, Tensor,
    TrainableMask,
};
