use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource limit: {what} needs {count} entries, cap is {cap}")]
    ResourceLimit {
        what: &'static str,
        count: usize,
        cap: usize,
    },

    #[error("cutoff too small: {0}")]
    CutoffTooSmall(String),

    #[error("assumption Av violated: |v(k)| exceeds (k^2+R)^-1 by {excess:.3e} at |k| = {k}")]
    AssumptionViolated { k: f64, excess: f64 },

    #[error("impurity potential not admissible: {0}")]
    ImpurityPotential(String),

    #[error("quadrature failed: error estimate {estimate:.3e} above tolerance {tolerance:.3e}")]
    QuadratureFailed { estimate: f64, tolerance: f64 },

    #[error("potential table incomplete: need separations up to {needed}, table ends at {available}")]
    TableIncomplete { needed: f64, available: f64 },

    #[error("unstable step size: {0}")]
    UnstableStep(String),

    #[error("propagation stalled: residual {residual:.3e} at substep {substep:.3e}")]
    PropagationStalled { residual: f64, substep: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("initial state violates the concentration condition: c0 = {0:.3e}")]
    InitialStateInadmissible(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::AssumptionViolated { .. }
            | Error::ImpurityPotential(_)
            | Error::TableIncomplete { .. }
            | Error::GridMismatch(_)
            | Error::Json(_) => 2,
            Error::ResourceLimit { .. } => 4,
            Error::CutoffTooSmall(_)
            | Error::QuadratureFailed { .. }
            | Error::UnstableStep(_)
            | Error::PropagationStalled { .. }
            | Error::InitialStateInadmissible(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}
