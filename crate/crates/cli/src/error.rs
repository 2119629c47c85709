use molalign_core::data::DataError;
use molalign_core::eval::EvalError;
use molalign_core::merge::MergeError;
use molalign_core::policy::PolicyError;
use molalign_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Compat(_) => 4,
            Self::Diverged(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, e: &std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Io { .. } => Self::Io(e.to_string()),
            MergeError::Config(_) => Self::Config(e.to_string()),
            MergeError::Incompatible(_) | MergeError::FingerprintMismatch { .. } => Self::Compat(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::Diverged { .. } => Self::Diverged(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Policy(p) => p.into(),
            TrainError::Loss(_) => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Contract(_) => Self::Data(e.to_string()),
            EvalError::Scorer(_) => Self::Config(e.to_string()),
        }
    }
}
