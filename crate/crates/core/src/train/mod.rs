//! Score-matching and quality-loss training.

mod features;
mod loss;
mod optim;
mod trainer;

pub use features::FeatureExtractor;
pub use loss::{
    estimate_sigma2, feature_distance, head_loss, prepare_pairs, quality_loss, quality_loss_sample,
    score_matching_loss, score_matching_loss_value, validation_draws, validation_feature_distance,
    validation_score_loss, LossGrad, NoiseDraw, TrainPair, SIGMA2_FLOOR,
};
pub use optim::{Adam, LinearDecay};
pub use trainer::{
    select_hybrid_exponent, ExponentSelection, StepRecord, TrainConfig, TrainOutcome, Trainer, ValidationRecord,
    HYBRID_GRID,
};

use crate::adjoint::AdjointError;
use crate::image::ImageError;
use crate::model::ModelError;
use crate::process::ProcessError;
use crate::sampler::SampleError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite {what} loss at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("feature extractor: {0}")]
    Features(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
