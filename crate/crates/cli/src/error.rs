use std::path::{Path, PathBuf};

use pgnn_core::datagen::DataError;
use pgnn_core::estimators::EstimatorError;
use pgnn_core::grid::GridError;
use pgnn_core::kron::KronError;
use pgnn_core::metrics::MetricsError;

/// Failure of a subcommand, mapped onto a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}: no such file")]
    MissingPath(PathBuf),
    #[error("missing required setting `{0}` (flag or config file)")]
    MissingSetting(&'static str),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Stalled(DataError),
    #[error(transparent)]
    Divergence(EstimatorError),
    #[error(transparent)]
    Singular(KronError),
    #[error("{0}")]
    Other(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub const EXIT_MISSING: i32 = 2;
    pub const EXIT_PARSE: i32 = 3;
    pub const EXIT_STALLED: i32 = 4;
    pub const EXIT_DIVERGENCE: i32 = 5;
    pub const EXIT_SINGULAR: i32 = 6;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingPath(_) | CliError::MissingSetting(_) => Self::EXIT_MISSING,
            CliError::Parse { .. } => Self::EXIT_PARSE,
            CliError::Stalled(_) => Self::EXIT_STALLED,
            CliError::Divergence(_) => Self::EXIT_DIVERGENCE,
            CliError::Singular(_) => Self::EXIT_SINGULAR,
            CliError::Other(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        CliError::Parse {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn grid(path: &Path, e: GridError) -> Self {
        match e {
            GridError::Parse { .. } | GridError::Validation { .. } | GridError::UnsupportedFeature(_) => {
                Self::parse(path, e)
            }
            other => CliError::Other(other.to_string()),
        }
    }

    pub fn data(path: &Path, e: DataError) -> Self {
        match e {
            DataError::GenerationStalled { .. } => CliError::Stalled(e),
            DataError::Parse { .. } => Self::parse(path, e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Divergence { .. } => CliError::Divergence(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<KronError> for CliError {
    fn from(e: KronError) -> Self {
        match e {
            KronError::SingularInteriorBlock(_) => CliError::Singular(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Estimator(e) => e.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::GenerationStalled { .. } => CliError::Stalled(e),
            other => CliError::Other(other.to_string()),
        }
    }
}
