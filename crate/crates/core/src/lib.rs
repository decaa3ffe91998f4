//! Infrared small-target segmentation network built from scratch: tensor
//! kernels, reverse-mode differentiation, the selective variable convolution,
//! content-guided attention and adaptive fusion blocks, training, metrics and
//! synthetic data.

pub mod autograd;
pub mod config;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;

pub use autograd::{grad_check, GradCheckReport, Tape, Var};
pub use nn::{DcgaNet, NetConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{ConvSpec, Scalar, Shape, Tensor4, TensorError};
