use thiserror::Error;

/// Errors reported by the filtering library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),
    #[error("{0} is not positive semidefinite")]
    NotPositiveSemidefinite(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("incompatible expectation method: {0}")]
    IncompatibleMethod(String),
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("observation map singular at {0}")]
    ObservationSingularity(String),
    #[error("degenerate particle ensemble: {0}")]
    DegenerateEnsemble(String),
    #[error("state blew up at t = {t}")]
    BlowUp { t: f64 },
    #[error("invalid observation record sequence: {0}")]
    InvalidRecords(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

pub(crate) fn check_step(dt: f64, allow_zero: bool) -> Result<()> {
    let ok = dt.is_finite() && (dt > 0.0 || (allow_zero && dt == 0.0));
    if !ok {
        return Err(Error::InvalidParameter {
            name: "dt".into(),
            reason: format!("step must be positive and finite, got {dt}"),
        });
    }
    Ok(())
}
