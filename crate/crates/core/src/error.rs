use crate::grid::Violation;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file does not conform to one of the on-disk formats (GPG1, GCN, TSV, checkpoint).
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    /// A posterior grid violates a structural invariant.
    #[error("invalid posterior grid: {0}")]
    Grid(Violation),

    #[error("vocabulary has no separator symbol to merge")]
    MissingSeparator,

    /// A confusion-network segment whose non-blank mass sums to zero (1-indexed).
    #[error("degenerate confusion-network segment {0}: non-blank mass is zero")]
    DegenerateSegment(usize),

    #[error("grapheme {0:?} is not in the vocabulary")]
    UnknownGrapheme(String),

    #[error("invalid window parameters: {0}")]
    WindowParams(String),

    /// Shape or vocabulary disagreement between inputs that must line up.
    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
