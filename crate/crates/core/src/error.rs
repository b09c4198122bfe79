use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{0}: bad magic, not a REPDYN01 tensor file")]
    BadMagic(PathBuf),

    #[error("{path}: unknown dtype code {code}")]
    UnknownDType { path: PathBuf, code: u8 },

    #[error("{path}: payload size mismatch, header implies {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing checkpoint file for epoch {epoch}, layer {layer}: {path}")]
    MissingCheckpoint {
        epoch: u32,
        layer: String,
        path: PathBuf,
    },

    #[error("inconsistent checkpoint store: {0}")]
    Inconsistent(String),

    #[error("layer `{layer}` not found; available layers: {}", available.join(", "))]
    LayerNotFound {
        layer: String,
        available: Vec<String>,
    },

    #[error("missing probe for layer {layer} at epoch {epoch}")]
    MissingProbe { layer: String, epoch: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-variance representation (self-HSIC is 0), CKA undefined")]
    ZeroVariance,

    #[error("collinear triplet: residual norm {residual:e} below tolerance {tolerance:e}")]
    Collinear { residual: f64, tolerance: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 I/O, 4 missing input,
    /// 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } => 2,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::UnknownDType { .. }
            | Error::Truncated { .. } => 3,
            Error::MissingCheckpoint { .. }
            | Error::Inconsistent(_)
            | Error::LayerNotFound { .. }
            | Error::MissingProbe { .. } => 4,
            Error::InvalidTensor(_)
            | Error::Shape(_)
            | Error::NonFinite(_)
            | Error::ZeroVariance
            | Error::Collinear { .. }
            | Error::Divergence { .. } => 5,
        }
    }
}
