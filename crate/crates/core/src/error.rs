use std::path::PathBuf;

use thiserror::Error;

use crate::numcore::NumError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{kind} file: {source}")]
    Format {
        kind: &'static str,
        #[source]
        source: FormatError,
    },
    #[error("{stage} diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },
    #[error("{stage} failed at epoch {epoch}: {source}")]
    Training {
        stage: &'static str,
        epoch: usize,
        #[source]
        source: NumError,
    },
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("threshold calibration failed: marked scores reach {max_marked} but clean scores start at {min_clean}")]
    Overlap { max_marked: f64, min_clean: f64 },
    #[error("label oracle: {0}")]
    Oracle(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numerics rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::Num(_) | Self::Diverged { .. } | Self::Training { .. }
        )
    }
}

/// Decoding failures shared by every binary artifact format.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated: need {needed} more bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("{0}")]
    Invalid(String),
}
