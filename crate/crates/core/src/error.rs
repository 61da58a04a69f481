use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hierarchy document is empty")]
    EmptyHierarchy,

    #[error("hierarchy contains a cycle through class `{0}`")]
    Cycle(String),

    #[error("class `{child}` has two parents: `{first}` and `{second}`")]
    DuplicateParent {
        child: String,
        first: String,
        second: String,
    },

    #[error("line {line}: {msg}")]
    HierarchySyntax { line: usize, msg: String },

    #[error("unknown class name `{0}`")]
    UnknownClass(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-finite value at row {row}, feature {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {0} has an empty label set")]
    EmptyLabel(usize),

    #[error("row {0} has more than one label; duplicate multi-labelled rows first")]
    MultiLabel(usize),

    #[error("label vector is not ancestor-closed at class {0}")]
    NotAncestorClosed(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least {needed} distinct groups, found {found}")]
    TooFewGroups { needed: usize, found: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("refusing to overwrite existing file {0}")]
    Clobber(PathBuf),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }
}
