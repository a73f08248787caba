//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by geometry, ingestion, model, metric, and harness code.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a precondition (out-of-range argument, empty input).
    #[error("domain error: {0}")]
    Domain(String),

    /// Multi-scale tiling geometry is inconsistent (overlapping origins,
    /// off-grid coordinates, region/patch size mismatch).
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Matrix or tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A cohort file could not be ingested; names the offending slide.
    #[error("ingestion error for slide '{slide}': {detail}")]
    Ingestion { slide: String, detail: String },

    /// A patch set is missing entries required by the slide geometry.
    #[error("completeness error: {0}")]
    Completeness(String),

    /// A run or variant configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// A metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A statistical test has no defined value on the given inputs.
    #[error("undefined test: {0}")]
    UndefinedTest(String),

    /// A risk split would leave one group empty.
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A manifest, header, config, or report file failed to parse.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Alignment(_) => "alignment",
            Error::Shape(_) => "shape",
            Error::Ingestion { .. } => "ingestion",
            Error::Completeness(_) => "completeness",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::UndefinedTest(_) => "undefined_test",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
