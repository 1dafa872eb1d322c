use pstrat::data::DataError;
use pstrat::em::EmError;
use pstrat::estimands::EstimandError;
use pstrat::propensity::PropensityError;
use pstrat::sensitivity::SensitivityError;
use pstrat::simulate::SimulateError;
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input data, configuration or generator spec.
    #[error("validation error: {0}")]
    Validation(String),
    /// A fit did not produce an estimate.
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Io(e.to_string()),
            DataError::Csv(ref c) if c.is_io_error() => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PropensityError> for CliError {
    fn from(e: PropensityError) -> Self {
        CliError::Estimation(format!("propensity model: {e}"))
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        match e {
            EmError::Data(d) => d.into(),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<EstimandError> for CliError {
    fn from(e: EstimandError) -> Self {
        CliError::Estimation(e.to_string())
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::EmptyGrid
            | SensitivityError::NonFiniteGrid(_)
            | SensitivityError::DuplicateGrid(_) => CliError::Validation(e.to_string()),
            SensitivityError::Data(d) => d.into(),
            SensitivityError::Io(_) | SensitivityError::Csv(_) | SensitivityError::Json(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Data(d) => d.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
