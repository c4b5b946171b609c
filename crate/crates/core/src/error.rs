use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("node id out of range: {id} (num_nodes = {num_nodes})")]
    NodeOutOfRange { id: usize, num_nodes: usize },

    #[error("self-loop on node {0} in edge file")]
    SelfLoop(usize),

    #[error("feature row count {found} does not match manifest num_nodes {expected}")]
    FeatureRows { expected: usize, found: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("empty segment {0} in segment_mean")]
    EmptySegment(usize),

    #[error("invalid segment ids: {0}")]
    Segments(String),

    #[error("backward requires a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("class {0} has no nodes; split is unusable")]
    EmptyClass(usize),

    #[error("training diverged at epoch {epoch}: total loss = {value}")]
    Diverged { epoch: usize, value: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
