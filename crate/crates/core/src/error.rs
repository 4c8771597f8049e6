use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Training produced a NaN or infinite parameter or logit.
    #[error("non-finite values during epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    /// `backward` was handed a cache produced by an older parameter set.
    #[error("stale forward cache: cache is from model version {cache}, model is at version {model}")]
    StaleCache { cache: u64, model: u64 },
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { op, msg: msg.into() }
    }
}
