use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("no trajectory points inside the configured window")]
    EmptyDataset,

    #[error("field has no observed cells in the selected lanes")]
    EmptyObservations,

    #[error("penetration rate {0} is outside (0, 1]")]
    InvalidRate(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid kernel specification: {0}")]
    InvalidKernel(String),

    #[error("lane index {lane} outside 1..={lanes}")]
    LaneOutOfRange { lane: u32, lanes: usize },

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("estimate is missing at cell (lane {lane}, space {space}, time {time}) which was not observed")]
    IncompleteEstimate { lane: u32, space: usize, time: usize },

    #[error("no cells available for evaluation")]
    NothingToEvaluate,

    #[error("wave angle {0} is parallel to the space axis; wave speed is infinite")]
    InfiniteWaveSpeed(f64),

    #[error("model is not a multi-output model")]
    NotMultiOutput,

    #[error("invalid configuration at {pointer} ({}): {message}", dotted_path(.pointer))]
    Config { pointer: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

/// `/sweep/rates/0` as `sweep.rates[0]`.
pub fn dotted_path(pointer: &str) -> String {
    let mut out = String::new();
    for seg in pointer.split('/').skip(1) {
        let seg = seg.replace("~1", "/").replace("~0", "~");
        if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
            out.push_str(&format!("[{seg}]"));
        } else {
            if !out.is_empty() {
                out.push('.');
            }
            out.push_str(&seg);
        }
    }
    if out.is_empty() {
        out.push('.');
    }
    out
}
