use thiserror::Error;

/// Errors raised across the scoring, selection, diagnostics and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("attention value {value} out of range at element {index}")]
    Range { index: usize, value: f32 },
    #[error("layer {layer} out of range for trace with {num_layers} layers")]
    InvalidLayer { layer: usize, num_layers: usize },
    #[error("ensemble depth K={k} out of range 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("decoder trace has no output tokens")]
    NoOutputTokens,
    #[error("budget must be at least 1")]
    InvalidBudget,
    #[error("selection does not fit sequence: {0}")]
    SelectionMismatch(String),
    #[error("selections are not comparable: {0}")]
    InvalidComparison(String),
    #[error("trace mismatch: {0}")]
    TraceMismatch(String),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("wrong trace role: expected {expected}, found {found}")]
    Role {
        expected: &'static str,
        found: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
