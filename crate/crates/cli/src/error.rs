use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_STALE: i32 = 4;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("refusing stale artifact {}: {reason}", path.display())]
    Stale { path: PathBuf, reason: String },
    #[error("vocabulary mismatch: checkpoint built for {expected}, corpus vocabulary is {actual}")]
    VocabMismatch { expected: String, actual: String },
    #[error("run directory {} is locked by another pipeline", .0.display())]
    Locked(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Stale { .. } | Self::VocabMismatch { .. } => EXIT_STALE,
            Self::Stage { .. } | Self::Locked(_) | Self::Io { .. } | Self::Format { .. } => EXIT_STAGE,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        Self::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
