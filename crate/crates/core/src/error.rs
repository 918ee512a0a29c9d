use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (valid: 0..{len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("derivative order {0} not supported (max 2)")]
    DerivativeOrder(usize),
    #[error("point {x} outside the interval [{a}, {b}]")]
    OutsideDomain { x: f64, a: f64, b: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is numerically singular at column {column}")]
    SingularMatrix { column: usize },
    #[error("non-finite residual at collocation point ({x}, {y})")]
    NonFiniteResidual { x: f64, y: f64 },
    #[error("inadmissible reflector state at ({x}, {y}): {reason}")]
    Inadmissible { x: f64, y: f64, reason: String },
    #[error("solver stalled: {0}")]
    Stalled(String),
    #[error("nested iteration failed at level {level} (N = {n}): {source}")]
    LevelFailed {
        level: usize,
        n: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
