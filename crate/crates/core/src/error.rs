use thiserror::Error;

/// Errors produced by grid construction, the PDE solvers and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate free boundary: max(s) = {0} is not positive")]
    DegenerateBoundary(f64),

    #[error("query point {x} lies outside [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },

    #[error("singular tridiagonal system at time level {level} (row {row})")]
    SingularSystem { level: usize, row: usize },

    #[error("constraint violation: s({t}) = {value} is below delta = {delta}")]
    ConstraintViolation { t: f64, value: f64, delta: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing measurements: {0}")]
    MissingMeasurements(String),

    #[error("boundary trace needs at least {needed} active nodes, level {level} has {found}")]
    InsufficientNodes { level: usize, needed: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
