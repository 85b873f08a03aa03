use std::path::PathBuf;

/// Errors produced by the reconstruction, alignment and kinematics routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),

    #[error("matrix cannot be projected onto SO(3): singular values {0:?}")]
    NonProjectable([f64; 3]),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("point {index} of pose {pose:?} has depth {depth:e}, not in front of the camera")]
    BehindCamera {
        pose: Option<usize>,
        index: usize,
        depth: f64,
    },

    #[error("pair graph is disconnected: {0}")]
    DisconnectedGraph(String),

    #[error("no supervising pixels")]
    NoSupervisingPixels,

    #[error(
        "optimization diverged ({0}); try re-initializing with more starts or a different seed"
    )]
    Divergence(String),

    #[error("inverse kinematics did not converge after {iterations} iterations, best residual {residual:e}")]
    IkNotConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("object not visible: {0}")]
    Visibility(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
