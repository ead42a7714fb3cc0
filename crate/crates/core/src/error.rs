use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum RblError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-positive {block} conditional variance at row {row} (value {value})")]
    NumericalDegeneracy {
        block: &'static str,
        row: usize,
        value: f64,
    },

    #[error("consensus requested before any message-passing iteration")]
    NotIterated,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RblError {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            RblError::DimensionMismatch { .. } => "dimension_mismatch",
            RblError::InvalidParameter { .. } => "invalid_parameter",
            RblError::DegenerateGeometry(_) => "degenerate_geometry",
            RblError::NumericalDegeneracy { .. } => "numerical_degeneracy",
            RblError::NotIterated => "not_iterated",
            RblError::EmptyInput(_) => "empty_input",
            RblError::Parse { .. } => "parse",
            RblError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RblError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = RblError> = std::result::Result<T, E>;
