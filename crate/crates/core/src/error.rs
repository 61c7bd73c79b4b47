//! Shared error type for the workspace.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/layer shape disagreement.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN or Inf produced by a primitive op; always a bug or a diverged run.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Cross-entropy over a batch where every pixel is ignored.
    #[error("cross entropy: every pixel in the batch is ignored")]
    EmptyBatch,

    /// Optimizer refused a step (e.g. a non-finite gradient).
    #[error("optimizer: {0}")]
    Optimizer(String),

    /// Inconsistent model/variant configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset construction or validation failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training aborted (a checkpoint of the last good state is kept).
    #[error("training aborted: {0}")]
    Train(String),

    /// On-disk format violation; offset is where decoding failed.
    #[error("format error in {path} at offset {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Raster id with no palette entry.
    #[error("render error: no palette entry for id {0}")]
    Palette(i64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
