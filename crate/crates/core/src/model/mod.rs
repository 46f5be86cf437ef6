//! The conditional denoiser and the score parametrizations built on it.

mod config;
mod network;
mod score;

pub use config::ModelConfig;
pub use network::{HeadVars, Heads, NetInput, ScoreNetwork};
pub use score::{
    hybrid_combine, lambda, score_eps, score_x0, AnalyticGaussianScore, HybridConfig, ModelScore, Parametrization,
    ScoreFn, ZeroScore,
};

use crate::process::ProcessError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model descriptor: {0}")]
    Descriptor(String),
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("input shape: {0}")]
    InputShape(String),
    #[error("hybrid exponent {0} outside [0.5, 1.5]")]
    HybridExponent(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}
