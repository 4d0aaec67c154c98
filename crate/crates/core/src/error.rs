use thiserror::Error;

use crate::training::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: argument outside the numeric domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("axis {axis} is out of range for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a rank-0 output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite training loss ({0})")]
    NonFiniteLoss(LossBreakdown),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },

    #[error("line {line}: cannot parse value `{value}` for key `{key}`")]
    Parse {
        line: usize,
        key: String,
        value: String,
    },

    #[error("line {line}: duplicate config key `{key}`")]
    Duplicate { line: usize, key: String },

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("checkpoint holds a {found} prior but a {expected} prior was requested")]
    PriorKindMismatch { expected: String, found: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}
