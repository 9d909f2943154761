use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid dataset spec, experiment config or hyper-parameter.
    #[error("configuration error: {0}")]
    Config(String),

    /// Task schedule or step index does not fit the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Shape mismatch or violated precondition of an operation.
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation does not support a layer or mode.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}: {value}")]
    NonFinite {
        term: String,
        iteration: usize,
        value: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
