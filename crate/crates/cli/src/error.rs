use std::path::PathBuf;

use ssda_core::data::idx::IdxError;
use ssda_core::data::DataError;
use ssda_core::losses::LossError;
use ssda_core::network::NetError;
use ssda_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    /// A file exists but its contents cannot be used.
    #[error("{0}")]
    Malformed(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Malformed(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub fn invalid<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Validation(msg.into()))
}

impl From<IdxError> for CliError {
    fn from(e: IdxError) -> Self {
        match e {
            IdxError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Malformed(format!("dataset: {other}")),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Idx(idx) => idx.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(source) => CliError::Io {
                path: PathBuf::from("<checkpoint>"),
                source,
            },
            NetError::Tensor(t) if matches!(t, ssda_core::autodiff::TensorError::NonFinite { .. }) => {
                CliError::Numerical(t.to_string())
            }
            NetError::Checkpoint(m) => CliError::Malformed(format!("checkpoint: {m}")),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Net(n) => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
