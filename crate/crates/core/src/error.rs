//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: line {line}: unsupported face with {vertices} vertices (triangles only)")]
    UnsupportedFace {
        path: PathBuf,
        line: usize,
        vertices: usize,
    },

    #[error("degenerate triangle {index} (area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("graph connectivity: {unreachable} unconstrained node(s) have no path to the constrained set")]
    GraphConnectivity { unreachable: usize },

    #[error("degenerate node {0}: zero Laplacian diagonal")]
    DegenerateNode(usize),

    #[error("training aborted: non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
