use diffsr::checkpoint::CheckpointError;
use diffsr::image::ImageError;
use diffsr::model::ModelError;
use diffsr::process::ProcessError;
use diffsr::sampler::SampleError;
use diffsr::train::TrainError;

/// Exit codes: 0 success, 1 usage or data, 2 numeric failure, 3 selfcheck
/// failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("selfcheck failed: {}", .0.join(", "))]
    Selfcheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Data(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Selfcheck(_) => 3,
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProcessError> for CliError {
    fn from(e: ProcessError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Config(_) => CliError::Usage(e.to_string()),
            SampleError::Solve(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Features(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
