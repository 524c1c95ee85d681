use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trajectory leaves the terrain extent on segment {segment}: {detail}")]
    OutsideTerrain { segment: usize, detail: String },

    #[error("too few points ({got}, need at least {need}) to compute a feature score")]
    TooFewPoints { got: usize, need: usize },

    #[error("information matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("pose graph: {0}")]
    Graph(String),

    #[error("pose graph is disconnected into {} components: {components:?}", components.len())]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("normal equations stayed singular after {retries} damped retries")]
    Singular { retries: usize },

    #[error("malformed {kind} file {path:?}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
