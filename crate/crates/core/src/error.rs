use thiserror::Error;

/// Errors raised by the fairness layer engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),
    #[error("no applicable region: every output region lacks one of the groups")]
    NoApplicableRegion,
    #[error("invalid bounds: lower {lower} > upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("unknown protected attribute `{0}`")]
    UnknownAttribute(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid fairness spec: {0}")]
    InvalidSpec(String),
    #[error("invalid group masks: {0}")]
    InvalidMasks(String),
    #[error("constraint set is infeasible")]
    Infeasible,
    #[error("solver exceeded {0} iterations")]
    MaxIterations(usize),
    #[error("gap direction is the zero vector")]
    ZeroDirection,
    #[error("too many inequality rows for subset enumeration: {rows} > {limit}")]
    TooManyConstraints { rows: usize, limit: usize },
    #[error("KKT system is singular")]
    SingularKkt,
    #[error("projector spectrum check failed: {0}")]
    SpectrumViolation(String),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),
    #[error("training batch constraint set is infeasible (epoch {epoch}, batch {batch})")]
    InfeasibleBatchConstraints { epoch: usize, batch: usize },
    #[error("stream is empty")]
    EmptyStream,
    #[error("degenerate group proportion {0}")]
    DegenerateProportion(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("split ratios must sum to 1, got {0}")]
    InvalidRatios(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
