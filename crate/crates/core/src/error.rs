use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmoeError {
    #[error(transparent)]
    Numeric(#[from] dmoe_numeric::NumericError),
    #[error("{0}")]
    Validation(String),
    #[error("missing input file: {0}")]
    MissingInput(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DmoeError>;

impl DmoeError {
    pub fn validation(msg: impl Into<String>) -> DmoeError {
        DmoeError::Validation(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            DmoeError::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DmoeError {
    let path = path.into();
    move |source| DmoeError::Io { path, source }
}
