use thiserror::Error;

/// Errors raised by the localization library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("under-resolved spectrum: wanted {wanted} peaks, found {found}")]
    UnderResolved { wanted: usize, found: usize },

    #[error("collinear geometry: triangulation denominator {denominator:.3e} is too small")]
    CollinearGeometry { denominator: f64 },

    #[error("inconsistent DoA pair: negative radicand {radicand:.3e}")]
    InconsistentDoa { radicand: f64 },

    #[error("matching capacity exceeded: {targets} targets exceeds limit {limit}")]
    CapacityExceeded { targets: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
