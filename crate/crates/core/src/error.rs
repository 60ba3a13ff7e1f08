use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("clip directory not found: {0}")]
    MissingClip(PathBuf),

    #[error("clip directory {0} contains no frames")]
    EmptyClip(PathBuf),

    #[error("failed to decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("frame {path} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        path: PathBuf,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("clip of {len} frames is too short: at least {required} frames are needed")]
    ClipTooShort { len: usize, required: usize },

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint contains unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("training failed at step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("label propagation: {0}")]
    Propagation(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Process exit code for the command-line front-end:
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Model(_)
            | Error::Propagation(_)
            | Error::Metrics(_) => 3,
            Error::Step { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
