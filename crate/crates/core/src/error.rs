use thiserror::Error;

/// Errors raised by the solver, the noise machinery and the filter.
#[derive(Debug, Error)]
pub enum QgError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular mass-constraint system (homogeneous wall-response integral {0:e})")]
    SingularConstraint(f64),
    #[error("CFL violation at step {step}: Courant number {courant:.4} exceeds {limit}")]
    Cfl { step: u64, courant: f64, limit: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed snapshot at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("noise basis is not divergence-free: normalized divergence {found:e} exceeds {tolerance:e}")]
    Divergence { found: f64, tolerance: f64 },
    #[error("requested {requested} noise modes but only {available} are resolvable")]
    TooManyModes { requested: usize, available: usize },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("truth has zero norm")]
    ZeroNorm,
    #[error("particle {particle}: {source}")]
    Particle {
        particle: usize,
        #[source]
        source: Box<QgError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = QgError> = std::result::Result<T, E>;
