//! Loss, optimizer, learning-rate schedule and the training loop.

pub mod loss;
pub mod optim;
pub mod session;
pub mod trainer;

pub use loss::{soft_iou_loss, DEFAULT_SMOOTH};
pub use optim::{adamw_step, clip_grad_norm, poly_lr, AdamWState};
pub use session::{fit, FitOptions, FitSummary};
pub use trainer::{evaluate_net, predict_probs, EpochReport, Precision, TrainConfig, Trainer};

use crate::autograd::AutogradError;
use crate::config::ConfigError;
use crate::metrics::MetricsError;
use crate::nn::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch} (samples {})", .ids.join(", "))]
    NonFinite {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
        what: String,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    BadConfig(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
}

impl TrainError {
    /// Numeric failures (as opposed to bad input or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. } | TrainError::NonFiniteGradient(_))
    }
}
