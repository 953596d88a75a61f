use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular energy: capsule {capsule} fires with a zero pre-activation")]
    SingularEnergy { capsule: usize },

    #[error("enumeration over {0} hidden capsules refused (limit is {max})", max = crate::capsule::MAX_ENUMERATION)]
    TooManyCapsules(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value during training at epoch {epoch}, batch {batch}: {what}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("orientation statistics missing for capsule {0}; restricted sampling needs a trained encoder")]
    MissingStats(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("IDX label file (magic 0x00000801) where images were expected")]
    LabelFile,

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics themselves rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::SingularEnergy { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
