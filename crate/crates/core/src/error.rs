use thiserror::Error;

/// Errors raised by the solvers, geometry kernels and configuration checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("exponent overflow in ionic term for species {species}: beta*q*phi = {exponent}")]
    Range { species: usize, exponent: f64 },

    #[error("degenerate surface metric at (u, v) = ({u}, {v}): |r_u x r_v| = {area}")]
    DegenerateMetric { u: f64, v: f64, area: f64 },

    #[error("deformation gradient is not invertible (det = {det})")]
    NonInvertible { det: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error(
        "Newton iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NewtonDiverged {
        iterations: usize,
        residual: f64,
        damping: Vec<f64>,
    },

    #[error("lipid density fixed point stagnated after {iterations} sweeps (|drho| = {change:e})")]
    FixedPointStagnation { iterations: usize, change: f64 },

    #[error("mesh is not fitted to interface at {position}")]
    MeshNotFitted { position: f64 },

    #[error("singular matching system: {0}")]
    SingularSystem(String),

    #[error("need at least 3 nodes on each side of the interface, found {found}")]
    InsufficientNodes { found: usize },

    #[error(
        "linear solver stagnated after {iterations} iterations (relative residual {residual:e})"
    )]
    LinearSolverStagnation { iterations: usize, residual: f64 },

    #[error("under-resolved geometry: {0}")]
    UnderResolved(String),

    #[error("trace probe at distance {offset} leaves the {side} region")]
    ProbeOutsideRegion { offset: f64, side: &'static str },

    #[error("lipid weight normalisation is not positive ({0})")]
    Normalization(f64),

    #[error("velocity support violates the separation condition: {0}")]
    SupportViolation(String),

    #[error("missing tangential gradient in interface trace")]
    MissingTangential,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
