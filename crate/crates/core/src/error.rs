use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (empty atlas, bad box, wrong sizes).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A metric sample failed the SPD test or a chart map is singular.
    #[error("geometry error at x = {point:?}: {reason}")]
    Geometry { point: Vec<f64>, reason: String },

    /// The grid is not compatible with the requested eps-lattice.
    #[error("alignment error on axis {axis}: {reason}")]
    Alignment { axis: usize, reason: String },

    #[error("atlas is not compatible with unfolding at eps = {eps}: {violations:?}")]
    UcViolation { eps: f64, violations: Vec<String> },

    #[error("partition of unity invalid: {0}")]
    Partition(String),

    #[error("conjugate gradient did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("tensor is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("transform not supported: {0}")]
    Transform(String),

    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numeric failures (solver divergence, lost definiteness) as opposed to
    /// rejected input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NotConverged { .. } | Error::NotSpd(_))
    }

    /// Stable machine-readable reason code.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension_mismatch",
            Error::Geometry { .. } => "geometry",
            Error::Alignment { .. } => "eps_alignment",
            Error::UcViolation { .. } => "uc_violation",
            Error::Partition(_) => "partition",
            Error::NotConverged { .. } => "cg_divergence",
            Error::NotSpd(_) => "spd_violation",
            Error::Transform(_) => "unsupported_transform",
            Error::Expr(_) => "expression",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
