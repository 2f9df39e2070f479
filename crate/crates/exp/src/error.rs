use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("matrix cells use different environments: {0}")]
    MismatchedEnvironment(String),

    #[error(transparent)]
    Core(#[from] bdtd_core::error::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("chart rendering failed: {0}")]
    Plot(String),
}

impl ExpError {
    /// 2 for anything the user can fix in the config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Parse { .. } | Self::MismatchedEnvironment(_) => 2,
            Self::Core(
                bdtd_core::error::Error::Config(_)
                | bdtd_core::error::Error::Schema(_)
                | bdtd_core::error::Error::Capacity { .. },
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExpError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExpError {
    let path = path.into();
    move |source| ExpError::Io { path, source }
}
