use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({i}, {j}, {k}) out of bounds for cube {dims}")]
    OutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        dims: crate::cube::Dims,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("malformed cube header, field `{field}`: {reason}")]
    Header { field: &'static str, reason: String },

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("payload has {extra} trailing bytes past the declared dimensions")]
    TrailingPayload { extra: usize },

    #[error(
        "infeasible configuration: sigma_t0 = {sigma_t0} < sigma_y / s_{index} = {ratio}"
    )]
    Infeasible {
        index: usize,
        sigma_t0: f64,
        ratio: f64,
    },

    #[error("fit failed at step {step}: {reason}")]
    Fit { step: usize, reason: String },

    #[error("reverse step {step} failed: {reason}")]
    Step { step: usize, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png export: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
