use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the analysis stack.
///
/// Variants carry enough location information (row, column, line, feature)
/// for a caller to point a user at the offending input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid value at row {row}, column '{column}': {reason}")]
    Value {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("parse error at line {line}, column '{column}': cannot parse '{value}' as {expected}")]
    Parse {
        line: u64,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("value out of range at line {line}, column '{column}': {value} is not in [0, 1]")]
    Range { line: u64, column: String, value: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("labels are required for this operation but none are present")]
    MissingLabels,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fraction must lie strictly inside (0, 1), got {0}")]
    InvalidFraction(f64),

    #[error("dimension mismatch: reference has {reference} features, target has {target}")]
    DimensionMismatch { reference: usize, target: usize },

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("covariance matrix is singular; use a positive shrinkage")]
    SingularCovariance,

    #[error("sample is empty")]
    EmptySample,

    #[error("degenerate binning: fewer than two non-empty bins")]
    DegenerateBinning,

    #[error("feature '{feature}': {source}")]
    Feature {
        feature: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown metric '{0}' (valid ids: {ids})", ids = crate::algorithms::Algorithm::valid_ids())]
    UnknownMetric(String),

    #[error("unknown feature '{0}'")]
    UnknownFeature(String),

    #[error("prediction set is empty")]
    EmptyPredictions,

    #[error("AUC requires both classes; only class {0} is present")]
    SingleClass(u8),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid batch size: {0}")]
    InvalidBatchSize(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_feature(self, feature: &str) -> Self {
        Error::Feature {
            feature: feature.to_string(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable identifier, used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema_error",
            Error::Value { .. } => "value_error",
            Error::Parse { .. } => "parse_error",
            Error::Range { .. } => "range_error",
            Error::Io { .. } => "io_error",
            Error::MissingLabels => "missing_labels",
            Error::InsufficientData(_) => "insufficient_data",
            Error::InvalidFraction(_) => "invalid_fraction",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TooFewSamples(_) => "too_few_samples",
            Error::SingularCovariance => "singular_covariance",
            Error::EmptySample => "empty_sample",
            Error::DegenerateBinning => "degenerate_binning",
            Error::Feature { source, .. } => source.code(),
            Error::UnknownMetric(_) => "unknown_metric",
            Error::UnknownFeature(_) => "unknown_feature",
            Error::EmptyPredictions => "empty_predictions",
            Error::SingleClass(_) => "single_class",
            Error::ZeroVector => "zero_vector",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidBatchSize(_) => "invalid_batch_size",
            Error::Json(_) => "json_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
