//! Error type shared by every module.

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A function argument was out of its domain or had the wrong shape.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A covariance matrix failed to factor after the jitter policy.
    #[error("matrix is not positive definite (leading minor {minor})")]
    NotPositiveDefinite { minor: usize },

    /// A design matrix is rank deficient.
    #[error("design matrix is singular: column {column} is linearly dependent on earlier columns")]
    Singular { column: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// Likelihood fitting never found a valid parameter set.
    #[error("fit failed: {0}")]
    Fit(String),

    /// A model or data file could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A model file was written by an incompatible version.
    #[error("incompatible file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Inputs do not match the schema a model was trained with.
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Singular { .. }
                | Error::Diverged { .. }
                | Error::Fit(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Adds the file name to an I/O error, keeping its kind.
pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Opens a file for reading with the name in any error.
pub(crate) fn open(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(at(path))
}
