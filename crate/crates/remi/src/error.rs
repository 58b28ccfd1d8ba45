//! Error taxonomy for the workbench.
//!
//! Shape problems, bad numerics, bad inputs, and pipeline-stage failures are
//! distinct variants so callers (and the CLI exit-code mapping) can tell
//! configuration mistakes from runtime failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller-supplied data violates a precondition (bad label, empty set, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Feature or probe requested beyond the granted access mode.
    #[error("access violation: {0}")]
    Access(String),

    /// Bytes on disk do not parse as the claimed format.
    #[error("malformed data: {0}")]
    Format(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Loss became non-finite during optimization.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    /// Unlearning can make no further progress.
    #[error("unlearning stalled at epoch {epoch}: {reason}")]
    Stalled { epoch: usize, reason: String },

    /// A pipeline stage failed; the tag names the stage for partial reports.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Io failure tagged with the file involved, so a failed stage names the
    /// artifact it was missing or could not write.
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// `map_err` adapter attaching `path` to an io error.
    pub fn at(path: impl Into<std::path::PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }

    /// Stage tag if this error was wrapped by a pipeline stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// True for errors that indicate a bad experiment file rather than a
    /// failed run (the CLI maps these to exit code 2).
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Input(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
