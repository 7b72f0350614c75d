use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {payoffs} payoffs but {probs} probabilities")]
    LengthMismatch { payoffs: usize, probs: usize },

    #[error("empty input")]
    Empty,

    #[error("probability {0} is negative")]
    NegativeProbability(f64),

    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid range [{low}, {high}]")]
    InvalidRange { low: f64, high: f64 },

    #[error("menu lotteries have different payoff counts ({0} vs {1})")]
    MenuShape(usize, usize),

    #[error("payoff {value} outside basis domain [{low}, {high}]")]
    OutOfDomain { value: f64, low: f64, high: f64 },

    #[error("probability {0} is on the simplex boundary; clamp before differentiating")]
    Boundary(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row}: {reason}")]
    DatasetRow { row: usize, reason: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("expected a collection of {expected} examples, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("category `{0}` carries no certificate")]
    MissingCertificate(&'static str),

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("{field}: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
