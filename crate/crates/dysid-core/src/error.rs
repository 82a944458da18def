//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A filtering or simulation produced a non-finite value.
    #[error("numerical range error at sample {index}: {context}")]
    NumericalRange { index: usize, context: String },

    /// Incompatible series/parameter shapes.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A declared graph input was not supplied to `forward_eval`.
    #[error("missing input '{0}'")]
    MissingInput(String),

    /// Structural problem in a computation graph (cycle, bad edge, duplicate name).
    #[error("graph error: {0}")]
    Graph(String),

    /// `backward` called before a completed forward pass.
    #[error("backward called before forward")]
    BackwardBeforeForward,

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A metric is undefined for the given data (e.g. constant reference signal).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training loss became non-finite.
    #[error("training diverged at iteration {iteration}: {context}")]
    Divergence { iteration: usize, context: String },

    /// A gradient became non-finite before an optimizer step.
    #[error("non-finite gradient in parameter group '{group}'")]
    NonFiniteGradient { group: String },

    /// Malformed dataset file.
    #[error("dataset parse error at line {line}: {message}")]
    DatasetParse { line: usize, message: String },

    /// I/O failure with path context.
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
