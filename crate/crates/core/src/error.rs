use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("malformed input at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("{} malformed line(s): {}", .0.len(), .0.iter().map(|(l, r)| format!("line {l}: {r}")).collect::<Vec<_>>().join("; "))]
    MalformedLines(Vec<(usize, String)>),

    #[error("relations with mixed tail kinds: {}", .0.join(", "))]
    MixedRelationKinds(Vec<String>),

    #[error("sampling pool has {available} entities, batch needs {requested}; use a smaller batch size or fewer facts per row")]
    PoolTooSmall { available: usize, requested: usize },

    #[error("row has no non-missing cells; emit a zero row embedding flagged as missing")]
    EmptyRow,

    #[error("training diverged at step {step} (lr {lr:e}): {detail}")]
    Diverged { step: usize, lr: f64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Schema(String),

    #[error("table has {n} rows, too few to split for fine-tuning (need at least {min}); use the featurizer with ridge instead")]
    TooFewRows { n: usize, min: usize },

    #[error("class {0} absent from the training split")]
    ClassAbsent(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
