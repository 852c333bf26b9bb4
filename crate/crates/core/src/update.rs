//! Implicit Gaussian measurement updates for an observation increment `dz`
//! over a step `dt`, with likelihood `p(dz | x) = N(h(x) dt, R dt)`.
//!
//! Three routes to the proximal (LMMR) update restricted to Gaussians:
//!
//! * precision form: `mu' = mu + P E'[grad log p]`,
//!   `P'^-1 = P^-1 - E'[hess log p]`;
//! * covariance form: `mu' = mu + P dC`, `P' = P + dH P / 2 + P dH^T / 2`
//!   with `dC`, `dH` from [`update_stats`] centered on the prior mean;
//! * natural gradient: `theta' = theta - F(theta)^-1 grad_theta E'[-log p]`
//!   in `(mean, vech(cov))` coordinates.
//!
//! `E'` denotes expectation under the unknown posterior, so every route is a
//! fixed point solved by [`crate::solver`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::expectation::{expected_misfit, likelihood_stats, update_stats, ExpectationMethod};
use crate::gaussian::{fisher_matrix, kl_divergence, vech_pairs, GaussianBelief};
use crate::models::ObservationModel;
use crate::solver::{self, FixedPointConfig, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateForm {
    #[default]
    Precision,
    Covariance,
    NaturalGradient,
}

/// Inverts a symmetric precision matrix. Directions with nonpositive
/// precision get zero variance, which the PSD floor then lifts and flags.
fn invert_precision(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = lambda.clone().cholesky() {
        return c.inverse();
    }
    let eig = SymmetricEigen::new(lambda.clone());
    let inv = eig.eigenvalues.map(|l| if l > 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn lmmr_step_precision(
    q: &GaussianBelief,
    model: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    let prior_precision = q.precision()?;
    let map = |at: &GaussianBelief| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s = likelihood_stats(model, at, dz, dt, method)?;
        let mean = q.mean() + q.cov() * &s.score;
        let cov = invert_precision(&(&prior_precision - &s.hessian));
        Ok((mean, cov))
    };
    let (mean, cov) = map(q)?;
    solver::solve(StepOutcome::explicit(mean, cov)?, fp, map)
}

pub fn lmmr_step_covariance(
    q: &GaussianBelief,
    model: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    let map = |at: &GaussianBelief| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s = update_stats(model, at, q.mean(), dz, dt, method)?;
        Ok(covariance_form_update(q, &s.dc, &s.dh))
    };
    let (mean, cov) = map(q)?;
    solver::solve(StepOutcome::explicit(mean, cov)?, fp, map)
}

/// `mu + P dC` and `P + dH P / 2 + P dH^T / 2`.
pub fn covariance_form_update(
    q: &GaussianBelief,
    dc: &DVector<f64>,
    dh: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = q.cov();
    let mean = q.mean() + p * dc;
    let cov = p + (dh * p + p * dh.transpose()) * 0.5;
    (mean, cov)
}

pub fn natural_gradient_step(
    q: &GaussianBelief,
    model: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    let d = q.dim();
    let fisher = fisher_matrix(q)?
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Fisher matrix".into()))?;
    let pairs = vech_pairs(d);
    let map = |at: &GaussianBelief| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s = likelihood_stats(model, at, dz, dt, method)?;
        // d/d mu E[-log p] = -E[grad log p];  d/dP E[-log p] = -E[hess log p] / 2
        let mut grad = DVector::zeros(d + pairs.len());
        grad.rows_mut(0, d).copy_from(&(-&s.score));
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let g = -0.5 * s.hessian[(i, j)];
            grad[d + k] = if i == j { g } else { 2.0 * g };
        }
        let step = fisher.solve(&grad);
        let mean = q.mean() - step.rows(0, d);
        let mut cov = q.cov().clone();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            cov[(i, j)] -= step[d + k];
            if i != j {
                cov[(j, i)] -= step[d + k];
            }
        }
        Ok((mean, cov))
    };
    let (mean, cov) = map(q)?;
    solver::solve(StepOutcome::explicit(mean, cov)?, fp, map)
}

pub fn lmmr_step(
    form: UpdateForm,
    q: &GaussianBelief,
    model: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    match form {
        UpdateForm::Precision => lmmr_step_precision(q, model, dz, dt, method, fp),
        UpdateForm::Covariance => lmmr_step_covariance(q, model, dz, dt, method, fp),
        UpdateForm::NaturalGradient => natural_gradient_step(q, model, dz, dt, method, fp),
    }
}

/// Proximal measurement objective
/// `E_q[0.5 |dz - h(x) dt|^2_{(R dt)^-1}] + KL(q || q_prev)`.
pub fn lmmr_objective(
    candidate: &GaussianBelief,
    prev: &GaussianBelief,
    model: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
) -> Result<f64> {
    check_dim("candidate vs prior", prev.dim(), candidate.dim())?;
    Ok(expected_misfit(model, candidate, dz, dt, method)? + kl_divergence(candidate, prev)?)
}
