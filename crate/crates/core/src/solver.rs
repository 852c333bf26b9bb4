//! Damped substitution iteration for the implicit Gaussian updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{max_abs, GaussianBelief};

/// Settings of the fixed-point iteration shared by every implicit step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iter: usize,
    /// Convergence threshold on the max-abs change over mean and covariance entries.
    pub tol: f64,
    /// Relaxation factor in (0, 1]; 1 is plain substitution.
    pub damping: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-10,
            damping: 1.0,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter {
                name: "max_iter".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol".into(),
                reason: format!("must be positive, got {}", self.tol),
            });
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "damping".into(),
                reason: format!("must lie in (0, 1], got {}", self.damping),
            });
        }
        Ok(())
    }
}

/// Result of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub belief: GaussianBelief,
    /// The PSD floor had to lift an eigenvalue of the covariance.
    pub degenerate: bool,
    /// Fixed-point iterations used (0 for explicit steps).
    pub iterations: usize,
}

impl StepOutcome {
    pub(crate) fn explicit(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let (belief, degenerate) = GaussianBelief::new_floored(mean, cov)?;
        Ok(Self {
            belief,
            degenerate,
            iterations: 0,
        })
    }
}

/// Iterates `q <- (1 - a) q + a map(q)` from `init` until the map moves the
/// iterate by at most `fp.tol`. `map` returns a raw mean and covariance; the
/// floor is applied to every iterate and its engagement is reported.
pub(crate) fn solve(
    init: StepOutcome,
    fp: &FixedPointConfig,
    mut map: impl FnMut(&GaussianBelief) -> Result<(DVector<f64>, DMatrix<f64>)>,
) -> Result<StepOutcome> {
    fp.validate()?;
    let mut degenerate = init.degenerate;
    let mut current = init.belief;
    let mut residual = f64::INFINITY;
    for iter in 1..=fp.max_iter {
        let (mean, cov) = map(&current)?;
        residual = (&mean - current.mean())
            .amax()
            .max(max_abs(&(&cov - current.cov())));
        if !residual.is_finite() {
            return Err(Error::NonFinite("fixed-point iterate".into()));
        }
        let a = fp.damping;
        let (mean, cov) = if a == 1.0 {
            (mean, cov)
        } else {
            (
                current.mean() * (1.0 - a) + mean * a,
                current.cov() * (1.0 - a) + cov * a,
            )
        };
        let (next, engaged) = GaussianBelief::new_floored(mean, cov)?;
        degenerate |= engaged;
        current = next;
        if residual <= fp.tol {
            return Ok(StepOutcome {
                belief: current,
                degenerate,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: fp.max_iter,
        residual,
    })
}
