use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. an out-of-range stage index.
    #[error("usage error: {0}")]
    Usage(String),

    /// An invariant that upstream code should have guaranteed was violated.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("dataset load failed with {} issue(s); first: {}", .0.len(), .0.first().map(|i| i.to_string()).unwrap_or_default())]
    Load(Vec<LoadIssue>),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step} (lr {lr:.3e}, batch ids {batch_ids:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

/// One itemized problem found while reading an interchange dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadIssue {
    pub record: String,
    pub file: Option<String>,
    pub kind: LoadIssueKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadIssueKind {
    MissingMask,
    MissingImage,
    DimMismatch {
        image: (u32, u32),
        mask: (u32, u32),
    },
    UnknownSplit(String),
    EmptyExpression,
    BadMask(String),
    BadImage(String),
}

impl std::fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "record {}", self.record)?;
        if let Some(file) = &self.file {
            write!(f, " ({file})")?;
        }
        match &self.kind {
            LoadIssueKind::MissingMask => write!(f, ": missing mask"),
            LoadIssueKind::MissingImage => write!(f, ": missing image"),
            LoadIssueKind::DimMismatch { image, mask } => write!(
                f,
                ": mask {}x{} does not match image {}x{}",
                mask.0, mask.1, image.0, image.1
            ),
            LoadIssueKind::UnknownSplit(s) => write!(f, ": unknown split {s:?}"),
            LoadIssueKind::EmptyExpression => write!(f, ": empty expression"),
            LoadIssueKind::BadMask(m) => write!(f, ": unreadable mask: {m}"),
            LoadIssueKind::BadImage(m) => write!(f, ": unreadable image: {m}"),
        }
    }
}
