use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("visit has no diagnosis codes")]
    EmptyVisit,
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("patient {0} has no diagnosis codes")]
    EmptyPatient(String),
    #[error("cohort too small: need at least {need}, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    Numerics(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index {index} out of range (limit {limit})")]
    Range { index: usize, limit: usize },
    #[error("id {id} out of vocabulary range {size}")]
    VocabRange { id: usize, size: usize },
    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("subsample kept only one label class after {0} retries")]
    DegenerateSample(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
