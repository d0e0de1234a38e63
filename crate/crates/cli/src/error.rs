use steerbo_core::bo::BoError;
use steerbo_core::objectives::ObjectiveError;
use steerbo_core::search_space::SpaceError;
use steerbo_nn::NnError;
use thiserror::Error;

/// Command failure, classified by the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SpaceError> for CliError {
    fn from(e: SpaceError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) => CliError::Config(e.to_string()),
            NnError::NonFinite(_) => CliError::Numeric(e.to_string()),
            NnError::Shape(_) | NnError::Data(_) | NnError::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ObjectiveError::Training(inner) => inner.into(),
            ObjectiveError::Io(_) => CliError::Data(e.to_string()),
            ObjectiveError::Protocol(_)
            | ObjectiveError::ProcessFailure { .. }
            | ObjectiveError::Timeout(_)
            | ObjectiveError::NonFinite => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<BoError> for CliError {
    fn from(e: BoError) -> Self {
        match e {
            BoError::Budget(_) | BoError::Space(_) => CliError::Config(e.to_string()),
            BoError::Io(_) | BoError::Csv(_) | BoError::Format(_) => CliError::Data(e.to_string()),
            BoError::Objective { source, .. } => source.into(),
            BoError::Surrogate(_) | BoError::Acquisition(_) | BoError::EmptyLog | BoError::EmptySummary => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}
