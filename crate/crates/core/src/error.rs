use std::path::PathBuf;

/// Errors produced by the layer-decomposition library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Arrays that must share a shape do not.
    #[error("structural error: {0}")]
    Structural(String),
    /// An argument or value is outside its allowed domain.
    #[error("validation error: {0}")]
    Validation(String),
    /// A computation produced a non-finite value.
    #[error("numerical error at timestep {timestep}: {message}")]
    Numerical { timestep: usize, message: String },
    /// Scene placement could not satisfy the visibility constraint.
    #[error("generation error: object {object} could not be placed after {attempts} attempts")]
    Generation { object: usize, attempts: usize },
    /// Training diverged.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },
    /// A caller asked for something the API forbids.
    #[error("contract violation: {0}")]
    ContractViolation(String),
    /// Requested problem size exceeds what the algorithm supports.
    #[error("capability error: {0}")]
    Capability(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
