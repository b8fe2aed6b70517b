use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown init scheme `{0}`")]
    UnknownInit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("failed to encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config, files) rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownInit(_)
                | Error::UnknownParam(_)
                | Error::EmptyDataset
                | Error::MissingFile(_)
                | Error::Decode { .. }
                | Error::Checkpoint(_)
        )
    }
}
