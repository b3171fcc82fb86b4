use std::fmt;
use std::path::Path;

use sentifuse::dataset::DatasetError;
use sentifuse::encoders::EncodeError;
use sentifuse::evaluation::EvalError;
use sentifuse::featurestore::StoreError;
use sentifuse::fusion::FusionError;
use sentifuse::training::TrainError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }
}

/// A command failure, reported as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    /// Offending configuration key, dotted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Config,
            key: Some(key.into()),
            message: message.to_string(),
        }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Data,
            key: None,
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            key: None,
            message: message.to_string(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::runtime(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("error serializes");
        v["error"] = serde_json::Value::Bool(true);
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{:?} error at `{k}`: {}", self.kind, self.message),
            None => write!(f, "{:?} error: {}", self.kind, self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::data(e)
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        match e {
            EncodeError::Config { ref branch, .. } => CliError::config(format!("backends.{branch}"), &e),
            EncodeError::MissingBranch(b) => CliError::config(format!("backends.{b}"), &e),
            EncodeError::Io(_) => CliError::data(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Encode(inner) => inner.into(),
            other => CliError::runtime(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::config("training", e),
            TrainError::Data(_) | TrainError::Incompatible(_) => CliError::data(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownBranch(_) => CliError::config("evaluation.ablate", e),
            EvalError::MissingBundle(_) | EvalError::Empty => CliError::data(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidSpec(_) => CliError::config("fusion", e),
            FusionError::Checkpoint(_) | FusionError::Io { .. } => CliError::data(e),
            _ => CliError::runtime(e),
        }
    }
}
