use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("non-positive standard deviation in {context}")]
    NonPositiveSigma { context: &'static str },
    #[error("non-finite value at tape node {node} ({op}) during {phase}")]
    NonFinite {
        node: usize,
        op: String,
        phase: &'static str,
    },
    #[error("target class {class} out of range (num_classes = {num_classes})")]
    TargetOutOfRange { class: usize, num_classes: usize },
    #[error("probability row {row} does not sum to 1 (sum = {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("bad IDX file {path}: {reason}")]
    Idx { path: String, reason: String },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, l: (usize, usize), r: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: l.0,
            left_cols: l.1,
            right_rows: r.0,
            right_cols: r.1,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
