use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range (limit {limit}) in {context}")]
    Index {
        index: usize,
        limit: usize,
        context: String,
    },
    #[error("sequence of length {len} exceeds the context window of {max}")]
    Length { len: usize, max: usize },
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    Range {
        name: String,
        value: usize,
        lo: usize,
        hi: usize,
    },
    #[error("invalid value: {0}")]
    Value(String),
    #[error("loss function is not deterministic: {first} then {second}")]
    Determinism { first: f64, second: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
