use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values encountered in {0}")]
    NonFinite(&'static str),
    #[error("explicit scheme unstable: dt = {dt} exceeds the diffusion bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("gradient vanished away from a solution (residual = {residual:e})")]
    Stagnation { residual: f64 },
    #[error("endpoint observation is not supported on trees")]
    TreeEndpoints,
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse: {0}")]
    CsvParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
