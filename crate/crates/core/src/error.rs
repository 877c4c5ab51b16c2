use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or argument value violates its contract.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("simulation diverged at substep {substep} (w_stiff = {w_stiff}, w_mass = {w_mass})")]
    Diverged {
        substep: usize,
        w_stiff: f64,
        w_mass: f64,
    },

    #[error("empty point set: {0}")]
    EmptyCloud(&'static str),

    #[error("all eligible faces have zero area")]
    DegenerateSurface,

    #[error("point cloud has no sampling provenance; gradients cannot be propagated to vertices")]
    MissingProvenance,

    #[error("loss report does not belong to these clouds ({0})")]
    StaleReport(String),

    #[error("loss adjoint given for frame {frame}, which is not a loss frame of this scenario")]
    AdjointFrame { frame: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
