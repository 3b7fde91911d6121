use std::path::{Path, PathBuf};

/// Failures of the std layer; wraps numerical/core errors.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] csi_llm_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(
        "stage `{stage}` has not produced {missing}; run it first or pass the file explicitly"
    )]
    Dependency {
        stage: &'static str,
        missing: String,
    },
    #[error("run directory {0} is locked by another process (remove the .lock file if stale)")]
    Locked(PathBuf),
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        LabError::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 configuration, 3 missing dependency,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use csi_llm_core::Error as E;
        match self {
            LabError::Config { .. } => 2,
            LabError::Core(
                E::Config { .. }
                | E::UnsupportedLength { .. }
                | E::Length { .. }
                | E::Dimension { .. },
            ) => 2,
            LabError::Core(
                E::NonFinite(_) | E::Divergence { .. } | E::DegenerateScale(_) | E::ZeroReference,
            ) => 4,
            LabError::Dependency { .. } => 3,
            _ => 1,
        }
    }
}
