use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // nifti
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated voxel payload: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("non-finite intensity at voxel {index}")]
    NonFinite { index: usize },
    #[error("value {value} at voxel {index} cannot be stored as {datatype}")]
    Unrepresentable {
        value: f64,
        index: usize,
        datatype: &'static str,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("mask voxel {index} has value {value}, expected 0 or 1")]
    InvalidMask { index: usize, value: f32 },

    // cohort
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("subject {0} is excluded and cannot be loaded")]
    ExcludedSubject(String),
    #[error("split size mismatch: {0}")]
    SizeMismatch(String),

    // inference
    #[error("invalid inference graph: {0}")]
    InvalidGraph(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("executor failure: {0}")]
    ExecutorFailure(String),
    #[error("slice count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("decision rule {decision} does not fit a {classes}-class prediction")]
    DecisionMismatch { decision: String, classes: usize },

    // metrics / popstats
    #[error("dice is undefined when both masks are empty")]
    BothEmpty,
    #[error("agreement needs at least one scorable pair")]
    NoScorablePairs,
    #[error("need at least 2 subjects for population statistics, got {0}")]
    TooFewSubjects(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake_case name of the variant, for machine-readable logs.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::UnsupportedDatatype(_) => "unsupported_datatype",
            Error::TruncatedData { .. } => "truncated_data",
            Error::NonFinite { .. } => "non_finite",
            Error::Unrepresentable { .. } => "unrepresentable",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::InvalidMask { .. } => "invalid_mask",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::ExcludedSubject(_) => "excluded_subject",
            Error::SizeMismatch(_) => "size_mismatch",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ExecutorFailure(_) => "executor_failure",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::DecisionMismatch { .. } => "decision_mismatch",
            Error::BothEmpty => "both_empty",
            Error::NoScorablePairs => "no_scorable_pairs",
            Error::TooFewSubjects(_) => "too_few_subjects",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Serialization(_) => "serialization",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
