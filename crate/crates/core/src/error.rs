use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Fewer points than the requested dimension, or the centered points have rank < m.
    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    /// No anchor in the batch produced a usable chart.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training failed: target not reached (best score {best})")]
    TrainingFailed { best: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used by the CLI's single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::DegenerateNeighborhood(_) => "degenerate_neighborhood",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::TrainingFailed { .. } => "training_failed",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}
