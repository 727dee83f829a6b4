use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}", path = .path.display())]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("{path}: truncated payload ({detail})", path = .path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: zero dimension in {dims:?}", path = .path.display())]
    ZeroDims { path: PathBuf, dims: [u32; 3] },

    #[error("study `{id}`: pet dims {pet:?} differ from ct dims {ct:?}")]
    DimMismatch {
        id: String,
        pet: [usize; 3],
        ct: [usize; 3],
    },

    #[error("study `{id}`: label {label} not in {{0, 1}}")]
    LabelDomain { id: String, label: i64 },

    #[error("{path}:{line}: {reason}", path = .path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input (flags, config, data files) rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite(_) | Error::TapeConsumed | Error::MissingGradient(_)
        )
    }
}
