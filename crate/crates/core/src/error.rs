use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm running statistics `{0}` are uninitialized; train before evaluating")]
    UninitializedStats(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head {head} cannot consume {input} input on a {arch} network")]
    HeadMismatch {
        head: String,
        input: String,
        arch: String,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt checkpoint record `{name}`: {detail}")]
    CorruptRecord { name: String, detail: String },

    #[error("checkpoint record `{0}` does not match any network parameter")]
    UnknownTensor(String),

    #[error("checkpoint record `{name}` has extents {found:?}, network expects {expected:?}")]
    ExtentMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for config key `{key}`: {detail}")]
    BadValue { key: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::HeadMismatch { .. }
                | Error::UnknownKey(_)
                | Error::BadValue { .. }
        )
    }
}
