//! Loss assembly, AdamW, the step learning-rate schedule, segmentation
//! metrics and the training/evaluation loops.

mod loss;
mod metrics;
mod optim;
mod trainer;

pub use loss::{segmentation_loss, LossTerms, LossWeights};
pub use metrics::{confusion_matrix, ConfusionMatrix, Metrics};
pub use optim::{adamw_step, lr_schedule, AdamW, OptimizerState};
pub use trainer::{
    argmax_labels, evaluate, predicted_labels, sigmoid, step_rng, EvalReport, EvalScores, StepRecord, TrainSettings, Trainer,
};

use crate::boundary::BoundaryError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
