use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("region outside feature map: {0}")]
    RegionOutside(String),

    #[error("rank-deficient covariance: only {available} eigenvalues above threshold, {requested} requested; use a smaller descriptor dimension")]
    RankDeficient { available: usize, requested: usize },

    #[error("insufficient training sample: {found} vectors, at least {minimum} required")]
    InsufficientSample { found: usize, minimum: usize },

    #[error("index not trained")]
    Untrained,

    #[error("index empty")]
    EmptyIndex,

    #[error("unknown image {0}")]
    UnknownImage(u32),

    #[error("query too small: {0}")]
    QueryTooSmall(String),

    #[error("corrupt artifact {what}: {reason}")]
    Corrupt { what: String, reason: String },

    #[error("infeasible benchmark: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-parsable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::Ingestion { .. } => "ingestion",
            Error::RegionOutside(_) => "region-outside",
            Error::RankDeficient { .. } => "rank-deficient",
            Error::InsufficientSample { .. } => "insufficient-sample",
            Error::Untrained => "untrained",
            Error::EmptyIndex => "index-empty",
            Error::UnknownImage(_) => "unknown-image",
            Error::QueryTooSmall(_) => "query-too-small",
            Error::Corrupt { .. } => "corrupt",
            Error::Infeasible(_) => "infeasible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
