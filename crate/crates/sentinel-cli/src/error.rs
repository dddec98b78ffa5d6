//! Command errors mapped onto process exit codes: 1 for metric-floor
//! failures, 2 for usage/config problems, 3 for runtime/numeric failures.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, missing inputs. Exit 2.
    Usage(String),
    /// A configured metric floor was violated. Exit 1.
    Floor(String),
    /// Runtime or numeric failure inside the pipeline. Exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Floor(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Floor(m) => write!(f, "metric floor violated: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sentinel_core::data::DataError> for CliError {
    fn from(e: sentinel_core::data::DataError) -> Self {
        use sentinel_core::data::DataError as D;
        match &e {
            D::MissingDir(_) | D::NoClasses(_) | D::BadSplit(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<sentinel_core::model::ModelError> for CliError {
    fn from(e: sentinel_core::model::ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::model::train::TrainError> for CliError {
    fn from(e: sentinel_core::model::train::TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::attack::AttackError> for CliError {
    fn from(e: sentinel_core::attack::AttackError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::detect::DetectError> for CliError {
    fn from(e: sentinel_core::detect::DetectError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::container::FileError> for CliError {
    fn from(e: sentinel_core::container::FileError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::metrics::MetricsError> for CliError {
    fn from(e: sentinel_core::metrics::MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sentinel_core::TensorError> for CliError {
    fn from(e: sentinel_core::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
