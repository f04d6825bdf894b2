use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid prescription: {0}")]
    Invalid(String),

    #[error("wavelength {0} nm outside the supported 400-800 nm band")]
    WavelengthOutOfBand(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("no surviving rays for field {field_deg} deg at {wavelength_nm} nm")]
    AllRaysDead { field_deg: f64, wavelength_nm: f64 },

    #[error("non-finite {what}: {value}")]
    NonFinite { what: String, value: f64 },

    #[error("{0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures of the numerics, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::AllRaysDead { .. } | Error::NonFinite { .. } | Error::Numerical(_)
        )
    }
}
