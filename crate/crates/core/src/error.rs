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

    #[error("not a single-file NIfTI-1 volume (magic {magic:?})")]
    BadMagic { magic: [u8; 4] },

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0} (expected uint8, int16, uint16, float32 or float64)")]
    UnsupportedDatatype(i16),

    #[error("expected a 3-dimensional volume, header declares {0} dimensions")]
    DimensionCount(i16),

    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scaling-and-squaring with {steps} steps leaves max |v|/2^steps = {ratio:.3} > 0.5 voxel")]
    TooFewSteps { steps: u32, ratio: f64 },

    #[error("objective `{0}` has no dense gradient; use FFD control-point perturbation")]
    UnsupportedObjective(String),

    #[error("engine `{engine}` cannot optimise objective `{objective}`")]
    IncompatibleObjective { engine: String, objective: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("png encoding error: {0}")]
    Png(#[from] png::EncodingError),

    #[error("unknown volume id `{0}`")]
    UnknownVolume(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
