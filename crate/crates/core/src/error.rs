use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed SMILES {smiles:?} at byte {position}: {reason}")]
    MalformedSmiles {
        smiles: String,
        position: usize,
        reason: String,
    },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("row {row}: missing label in column {column:?}")]
    MissingLabel { row: usize, column: String },

    #[error("row {row}: invalid label {value:?} in column {column:?}")]
    InvalidLabel {
        row: usize,
        column: String,
        value: String,
    },

    #[error("width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },

    #[error("similarity matrix of {n} molecules exceeds the dense cap of {cap}")]
    SizeLimit { n: usize, cap: usize },

    #[error("id {0} is not in the unlabeled pool")]
    NotUnlabeled(usize),

    #[error("no item in the batch has a positive partner")]
    DegenerateBatch,

    #[error("non-finite loss value {value} ({context})")]
    NonFinite { value: f64, context: String },

    #[error("{method} is not supported for {task} tasks")]
    TaskTypeUnsupported { method: String, task: String },

    #[error("no label has both classes present")]
    SingleClass,

    #[error("empty positive or negative set for every molecule")]
    EmptySet,

    #[error("at least two molecules are needed for a pair mean")]
    EmptyPairSet,

    #[error("no results found in {0}")]
    NoResults(PathBuf),

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::Row {
            row,
            source: Box::new(self),
        }
    }
}
