use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("taxonomy: {0}")]
    Taxonomy(#[from] TaxonomyError),

    /// The selection set dropped at least one positive category.
    #[error("selection missed positive categories {missing:?}")]
    SelectionMissedPositives { missing: Vec<usize> },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("malformed document: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("duplicate node id {id} (record {record})")]
    DuplicateId { id: i64, record: usize },

    #[error("node {id} (record {record}) references missing parent {parent}")]
    DanglingParent { id: i64, parent: i64, record: usize },

    #[error("cycle detected through nodes {chain:?}")]
    Cycle { chain: Vec<i64> },

    #[error("unknown category id {0}")]
    UnknownId(i64),
}
