use thiserror::Error;

use crate::inference::ModelState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, grid or scenario settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the domain of a mathematical function.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse: mismatched lengths, empty inputs and the like.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Factorization failure or non-finite intermediate values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The sampler reached a state with a non-finite likelihood or a
    /// singular conditional; carries the offending state.
    #[error("sampler diverged: {message}")]
    Diverged { message: String, state: Box<ModelState> },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
