use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input too short for {op}: length {len} with padding {padding} is below kernel size {kernel}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        padding: usize,
        kernel: usize,
    },
    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("training diverged: {reason} (loss curve: {curve:?})")]
    Divergence { reason: String, curve: Vec<f32> },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
