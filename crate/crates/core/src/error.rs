use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("finite-difference evaluation was non-finite at parameter {tensor}[{index}]")]
    FiniteDiffNonFinite { tensor: usize, index: usize },
    #[error("timestep {t} outside 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("record parse error at line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
