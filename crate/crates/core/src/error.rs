use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-rank subspace")]
    ZeroRank,
    #[error("zero vector has no cone membership")]
    ZeroVector,
    #[error("points too far apart for a chart: distance {0}")]
    ChartTooFar(f64),
    #[error("degenerate splitting: {0}")]
    DegenerateSplitting(String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("invalid parameter `{0}`: {1}")]
    InvalidParameter(String, String),
    #[error("invertibility check failed: |det| = {0} at sampled point")]
    NotInvertible(f64),
    #[error("gap violation: {0}")]
    GapViolation(String),
    #[error("intersection dimension {got} differs from expected {want}")]
    IntersectionDim { got: usize, want: usize },
    #[error("no index k <= {0} passes")]
    NoIndex(u32),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("point outside certified ball: distance {dist} >= radius {radius}")]
    OutsideBall { dist: f64, radius: f64 },
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("solver diverged after {0} iterations")]
    Divergence(usize),
    #[error("contract failure: {0}")]
    ContractFailure(String),
    #[error("no transition found out of segment {0}")]
    NoTransition(usize),
    #[error("retry budget exhausted: {0}")]
    RetryExhausted(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
