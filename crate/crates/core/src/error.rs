//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid size n={0} out of range (2..=256)")]
    GridSize(usize),

    #[error("field does not match grid (expected {expected} dofs, got {got})")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("fields live on different grids (n={0} vs n={1})")]
    GridMismatch(usize, usize),

    #[error("region mask is empty: {0}")]
    DegenerateRegion(String),

    #[error("time set has zero measure")]
    DegenerateTimeSet,

    #[error("time interval [{0}, {1}] not within [0, {2}]")]
    IntervalOutOfRange(f64, f64, f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("velocity is not discretely divergence-free (relative curl-range residual {residual:.3e} > {tol:.3e})")]
    NotDivergenceFree { residual: f64, tol: f64 },

    #[error("dense eigendecomposition limited to n <= 64 (got n={0}); use the stepping path for larger grids")]
    EigenSize(usize),

    #[error("negative time step dt={0}")]
    NegativeDt(f64),

    #[error("forcing violates its support: {0} nonzero samples outside omega x E")]
    ForcingSupport(usize),

    #[error("mismatched horizons ({0} vs {1})")]
    HorizonMismatch(f64, f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("observation norm is zero; observability quotient is degenerate")]
    DegenerateObservation,

    #[error("dual synthesis failed: {0}")]
    SynthesisFailure(String),

    #[error("invalid bisection bracket: minimal norms at endpoints are {at_lo:.6e} and {at_hi:.6e}, budget {budget:.6e}")]
    InvalidBracket { at_lo: f64, at_hi: f64, budget: f64 },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation error in `{field}`: {message}")]
    ConfigValidation { field: String, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse(_) | Error::ConfigValidation { .. } => 2,
            Error::Internal(_) | Error::Io(_) => 4,
            _ => 3,
        }
    }
}
