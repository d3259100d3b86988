use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced anywhere in the pipeline library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lexicon: {0}")]
    Lexicon(String),

    #[error("cannot sample {requested} items: only {available} candidates exist")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("CoNLL-U sentence {sentence}: {reason}")]
    Conllu { sentence: String, reason: String },

    #[error("token index {index} out of range 1..={len}")]
    TokenIndex { index: usize, len: usize },

    #[error("invariance check for item {item_id}: {reason}")]
    Invariance { item_id: u32, reason: String },

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("activation store: {0}")]
    Store(String),

    #[error("checksum mismatch in {}: manifest says {expected:08x}, file hashes to {actual:08x}", file.display())]
    Checksum { file: PathBuf, expected: u32, actual: u32 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("standardizer needs at least 2 training vectors, got {0}")]
    TooFewVectors(usize),

    #[error("probe: {0}")]
    Probe(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("regression: {0}")]
    Regression(String),

    #[error("bootstrap: {0}")]
    Bootstrap(String),

    #[error("report: {0}")]
    Report(String),

    #[error("patching: {0}")]
    Patch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
