use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] sgvi_core::Error),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// Process exit code: 2 for bad input, 3 for a failed run.
    pub fn exit_code(&self) -> i32 {
        use sgvi_core::Error as E;
        match self {
            LabError::Validation(_) | LabError::Json { .. } => 2,
            LabError::Core(
                E::DimensionMismatch { .. }
                | E::InvalidArgument(_)
                | E::Configuration(_)
                | E::UnknownName(_)
                | E::Conversion(_),
            ) => 2,
            _ => 3,
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;
