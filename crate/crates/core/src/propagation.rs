//! Gaussian propagation through Langevin dynamics: the proximal
//! Bures-Wasserstein (JKO) step restricted to Gaussians.
//!
//! The explicit step is one Euler step of
//! `mu' = b`, `P' = A P + P A^T + 2 eps I` with `b = -E[grad V]`,
//! `A = -E[hess V]` under the current belief. The implicit step evaluates the
//! same statistics under the unknown output belief and solves the resulting
//! fixed point.

use nalgebra::DMatrix;

use crate::error::{check_dim, check_step, Result};
use crate::expectation::{drift_stats, expected_potential, ExpectationMethod};
use crate::gaussian::{bures_wasserstein_distance_sq, GaussianBelief};
use crate::models::PotentialModel;
use crate::solver::{self, FixedPointConfig, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropagationKind {
    #[default]
    Explicit,
    Implicit,
}

fn moved(
    q: &GaussianBelief,
    stats_at: &GaussianBelief,
    model: &PotentialModel,
    dt: f64,
    method: ExpectationMethod,
) -> Result<(nalgebra::DVector<f64>, DMatrix<f64>)> {
    let s = drift_stats(model, stats_at, method)?;
    let d = q.dim();
    let p = q.cov();
    let mean = q.mean() + &s.b * dt;
    let diffusion = DMatrix::identity(d, d) * (2.0 * model.epsilon());
    let cov = p + (&s.a * p + p * s.a.transpose() + diffusion) * dt;
    Ok((mean, cov))
}

pub fn jko_step_explicit(
    q: &GaussianBelief,
    model: &PotentialModel,
    dt: f64,
    method: ExpectationMethod,
) -> Result<StepOutcome> {
    check_dim("belief vs potential", model.dim(), q.dim())?;
    check_step(dt, true)?;
    let (mean, cov) = moved(q, q, model, dt, method)?;
    StepOutcome::explicit(mean, cov)
}

/// Solves `mu' = mu - dt E_{q'}[grad V]`,
/// `P' = P - dt E_{q'}[hess V] P - dt P E_{q'}[hess V]^T + 2 eps dt I`
/// by damped substitution started from the explicit step.
pub fn jko_step_implicit(
    q: &GaussianBelief,
    model: &PotentialModel,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    let init = jko_step_explicit(q, model, dt, method)?;
    solver::solve(init, fp, |current| moved(q, current, model, dt, method))
}

pub fn jko_step(
    kind: PropagationKind,
    q: &GaussianBelief,
    model: &PotentialModel,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    match kind {
        PropagationKind::Explicit => jko_step_explicit(q, model, dt, method),
        PropagationKind::Implicit => jko_step_implicit(q, model, dt, method, fp),
    }
}

/// Proximal objective of the Gaussian JKO step, up to a constant:
/// `E_q[V] + eps E_q[log q] + d_bw(q, q_prev)^2 / (2 dt)`.
///
/// The first two terms are `eps * KL(q || pi)` for `pi ~ exp(-V / eps)`; the
/// `eps` scaling is the one whose stationary point is the implicit step
/// above. `dt = inf` drops the transport term.
pub fn jko_objective(
    candidate: &GaussianBelief,
    prev: &GaussianBelief,
    model: &PotentialModel,
    dt: f64,
    method: ExpectationMethod,
) -> Result<f64> {
    check_dim("belief vs potential", model.dim(), candidate.dim())?;
    check_step(dt, false).or_else(|e| if dt == f64::INFINITY { Ok(()) } else { Err(e) })?;
    let energy = expected_potential(model, candidate, method)?;
    let entropy = gaussian_neg_entropy(candidate)?;
    let transport = if dt.is_infinite() {
        0.0
    } else {
        bures_wasserstein_distance_sq(candidate, prev)? / (2.0 * dt)
    };
    Ok(energy + model.epsilon() * entropy + transport)
}

/// `E_q[log q] = -0.5 * log det(2 pi e P)`.
pub(crate) fn gaussian_neg_entropy(q: &GaussianBelief) -> Result<f64> {
    let chol = q
        .cov()
        .clone()
        .cholesky()
        .ok_or_else(|| crate::Error::NotPositiveDefinite("belief covariance".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = q.dim() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det))
}
