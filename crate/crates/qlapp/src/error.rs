use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, AppError>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] qlapp_core::Error),
    /// Bad input that was caught before any numerics ran.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    /// A Monte Carlo study gave up, e.g. because too many replicates failed.
    #[error("study aborted: {0}")]
    Aborted(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for validation failures, 3 for numerical ones, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(e) if e.is_validation() => 2,
            AppError::Core(_) | AppError::Aborted(_) => 3,
            AppError::Invalid(_) | AppError::Json(_) | AppError::Csv(_) => 2,
            AppError::Io { .. } => 1,
        }
    }
}
