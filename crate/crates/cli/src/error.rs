use fsdetr_core::evaltool::EvalError;
use fsdetr_core::synthworld::SynthError;
use fsdetr_core::trainpipe::TrainError;

/// Failure classes, one per process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("contamination: {0}")]
    Contamination(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Contamination(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Contamination(m) => CliError::Contamination(m),
            SynthError::Io(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Contamination(m) => CliError::Contamination(m),
            TrainError::Synth(s) => s.into(),
            e @ TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Contamination(m) => CliError::Contamination(m),
            EvalError::Synth(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
