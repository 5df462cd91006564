use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"CLDF\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("shape {0:?} overflows the addressable element count")]
    ShapeOverflow(Vec<usize>),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("timestep {t} outside schedule range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("feature provider returned inconsistent blocks: {0}")]
    InconsistentFeatures(String),

    #[error("classifier failure: {0}")]
    Classifier(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("embedding {index} is not unit-norm (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no supervisory pixels: every image was skip-flagged")]
    NoSupervisoryPixels,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::IoAt { .. } => "io",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::Truncated { .. } => "truncated",
            Error::ShapeOverflow(_) => "shape_overflow",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::Header(_) => "malformed_header",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::InconsistentFeatures(_) => "inconsistent_features",
            Error::Classifier(_) => "classifier",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotNormalized { .. } => "not_normalized",
            Error::TooFewPoints { .. } => "too_few_points",
            Error::EmptyInput(_) => "empty_input",
            Error::NoSupervisoryPixels => "no_supervisory_pixels",
            Error::Numerical(_) => "numerical",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingInput(_) => "missing_input",
            Error::Csv { .. } => "csv",
        }
    }

    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoAt { path, source }
    }
}
