use thiserror::Error;

use crate::geometry::GeometryError;
use crate::pwanet::PwaError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] PwaError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("point {0:?} lies outside the partition domain")]
    NotInDomain(Vec<f64>),
    #[error("{context}: {source}")]
    Lp {
        context: String,
        #[source]
        source: GeometryError,
    },
    #[error("equilibrium of the reference violates constraint `{constraint}` (c = {value:e})")]
    InfeasibleReference { constraint: String, value: f64 },
    #[error("estimator not verified after {iterations} iterations (violation {violation:e} at r = {witness_r:?})")]
    Unverified {
        iterations: usize,
        violation: f64,
        witness_r: Vec<f64>,
        witness_x: Vec<f64>,
    },
    #[error("lyapunov training failed: {0}")]
    TrainingFailed(String),
    #[error("constraint `{constraint}` violated at step {step} (c = {value:e}, x = {state:?})")]
    ConstraintViolated {
        step: usize,
        constraint: String,
        value: f64,
        state: Vec<f64>,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn lp(context: impl Into<String>, source: GeometryError) -> Self {
        Error::Lp {
            context: context.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Geometry(GeometryError::NumericalFailure(_)) => true,
            Error::Lp { source, .. } => matches!(source, GeometryError::NumericalFailure(_)),
            Error::Unverified { .. } | Error::TrainingFailed(_) => true,
            _ => false,
        }
    }
}
