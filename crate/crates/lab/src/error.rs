use std::path::{Path, PathBuf};

use ldar_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}:{line}: {detail}", path.display())]
    Data { path: PathBuf, line: usize, detail: String },

    #[error("{}: checkpoint format error: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("{}: checkpoint shape error: {detail}", path.display())]
    Shape { path: PathBuf, detail: String },

    #[error("{}: {detail}", path.display())]
    Config { path: PathBuf, detail: String },

    #[error("{0}")]
    Usage(String),

    #[error("{label}: {source}")]
    Strategy { label: String, source: Box<LabError> },
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.to_path_buf(), source }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    /// 1 usage, 2 data, 3 oracle, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(e) => match e {
                CoreError::Usage(_) | CoreError::Config(_) => 1,
                CoreError::Data(_) => 2,
                CoreError::Oracle(_) | CoreError::Protocol(_) => 3,
                CoreError::NonFinite { .. } | CoreError::Domain { .. } | CoreError::Dimension { .. } => 4,
            },
            LabError::Usage(_) | LabError::Config { .. } => 1,
            LabError::Io { .. } | LabError::Data { .. } | LabError::Format { .. } | LabError::Shape { .. } => 2,
            LabError::Strategy { source, .. } => source.exit_code(),
        }
    }
}
