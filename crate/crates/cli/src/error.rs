use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: taemi_core::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed (max rel err {max_rel_error:.3e}, tolerance {tolerance:.1e})")]
    GradCheckFailed { max_rel_error: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use taemi_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::GradCheckFailed { .. } => EXIT_NUMERIC,
            CliError::Core { source, .. } => match source {
                E::Parameter(_) => EXIT_USAGE,
                E::Io { .. } => EXIT_IO,
                E::Numeric(_) | E::DegenerateMask { .. } => EXIT_NUMERIC,
                E::Validation(_)
                | E::Parse { .. }
                | E::Schema { .. }
                | E::Dimension { .. }
                | E::CorruptCheckpoint(_)
                | E::CheckpointVersion { .. } => EXIT_DATA,
                E::Contract(_) => EXIT_INTERNAL,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attaches a description of the failed step to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for taemi_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
