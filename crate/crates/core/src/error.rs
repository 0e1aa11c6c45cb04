use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector did not have the shape required by an operation's contract.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Cosine similarity is undefined because an entire class anchor has zero norm.
    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    /// A configuration file or value was invalid.
    #[error("config error: {0}")]
    Config(String),

    /// The data layer could not satisfy a request (deficient class, bad partition, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An IDX file was malformed.
    #[error("idx error: {0}")]
    Idx(String),

    /// A runtime invariant was breached mid-experiment.
    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
