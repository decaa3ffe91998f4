//! Network blocks and the assembled encoder/decoder.

mod blocks;
mod layers;
mod net;

pub use blocks::{
    AdffBlock, CbamBlock, DcgaBlock, DcgaWiring, DoubleConv, SeBlock, SvcBlock, SvcBranches, DILATIONS,
};
pub use layers::{Builder, ConvLayer, Ctx, DeformLayer, Init};
pub use net::{AttentionKind, DcgaNet, NetConfig, NetOutput, Prediction};

use crate::config::ConfigError;
use crate::params::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigText(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint schedule {found} does not match expected {expected}")]
    Schedule { expected: String, found: String },
}
