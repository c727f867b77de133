use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced or received a NaN/inf value.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    /// A tape value id does not refer to a node on this tape.
    #[error("value id {0} is not on the tape (len {1})")]
    NotOnTape(usize, usize),

    /// A tap name is not defined on the network.
    #[error("unknown tap name: {0}")]
    UnknownTap(String),

    /// Labels outside the domain expected by the loss.
    #[error("invalid label: {0}")]
    InvalidLabel(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Index (domain id, layer id, ...) out of range.
    #[error("{what} out of range: {index} (valid 0..{len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    /// A metric's preconditions are not met (e.g. single-class AUC input).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Malformed serialized data (checkpoint, dataset, IDX file).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
