//! The continuous variational Kalman filter and its exact linear references.
//!
//! One filter step propagates the belief through the dynamics (JKO step) and
//! then conditions it on the observation increment of the same interval
//! (LMMR step). As `dt -> 0` the composition follows
//!
//! ```text
//! d mu = b dt + P dC
//! d P  = (A P + P A^T + 2 eps I) dt + (dH P + P dH^T) / 2
//! ```
//!
//! which reduces to the Kalman-Bucy filter and the Riccati equation for
//! linear systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, check_step, Error, Result};
use crate::expectation::ExpectationMethod;
use crate::gaussian::{symmetrize, GaussianBelief};
use crate::models::{LinearModelPair, ObservationModel, PotentialModel};
use crate::propagation::{jko_step, PropagationKind};
use crate::simulation::ObservationRecord;
use crate::solver::{FixedPointConfig, StepOutcome};
use crate::update::{lmmr_step, UpdateForm};

/// Which step map a filter run applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Cvkf {
        propagation: PropagationKind,
        update: UpdateForm,
    },
    /// Requires a quadratic potential and a linear observation map.
    KalmanBucy,
    PropagationOnly(PropagationKind),
    UpdateOnly(UpdateForm),
}

impl Default for FilterKind {
    fn default() -> Self {
        FilterKind::Cvkf {
            propagation: PropagationKind::Explicit,
            update: UpdateForm::Precision,
        }
    }
}

/// Filter output: one belief per time, plus per-step degeneracy flags
/// (`flags[k]` refers to the step producing `beliefs[k + 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTrajectory {
    pub times: Vec<f64>,
    pub beliefs: Vec<GaussianBelief>,
    pub flags: Vec<bool>,
}

impl BeliefTrajectory {
    pub fn degenerate_steps(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }
}

/// Propagate then update.
#[allow(clippy::too_many_arguments)]
pub fn cvkf_step(
    q: &GaussianBelief,
    pmodel: &PotentialModel,
    omodel: &ObservationModel,
    dz: &DVector<f64>,
    dt: f64,
    propagation: PropagationKind,
    update: UpdateForm,
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<StepOutcome> {
    let predicted = jko_step(propagation, q, pmodel, dt, method, fp)?;
    let mut out = lmmr_step(update, &predicted.belief, omodel, dz, dt, method, fp)?;
    out.degenerate |= predicted.degenerate;
    out.iterations += predicted.iterations;
    Ok(out)
}

/// One Euler step of the Kalman-Bucy filter:
/// `mu' = mu + F mu dt + P G^T R^-1 (dz - G mu dt)`,
/// `P' = P + (F P + P F^T - P G^T R^-1 G P + 2 eps I) dt`.
pub fn kalman_bucy_step(
    q: &GaussianBelief,
    lin: &LinearModelPair,
    dz: &DVector<f64>,
    dt: f64,
) -> Result<StepOutcome> {
    check_dim("belief vs linear model", lin.dim(), q.dim())?;
    check_dim("observation increment", lin.g.nrows(), dz.len())?;
    check_step(dt, false)?;
    let r_inv = lin
        .r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("observation noise".into()))?
        .inverse();
    let p = q.cov();
    let gain = p * lin.g.transpose() * &r_inv;
    let mean = q.mean() + &lin.f * q.mean() * dt + &gain * (dz - &lin.g * q.mean() * dt);
    let cov = p + riccati_rhs(lin, p, &r_inv) * dt;
    StepOutcome::explicit(mean, cov)
}

fn riccati_rhs(lin: &LinearModelPair, p: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let d = lin.dim();
    let fp = &lin.f * p;
    let gp = &lin.g * p;
    &fp + fp.transpose() - gp.transpose() * r_inv * gp + DMatrix::identity(d, d) * (2.0 * lin.epsilon)
}

/// Classical RK4 integration of the Riccati equation from `p0` over
/// `[0, horizon]` with step `dt_fine`. Returns `(t, P(t))` at every step.
pub fn riccati_reference(
    lin: &LinearModelPair,
    p0: &DMatrix<f64>,
    horizon: f64,
    dt_fine: f64,
) -> Result<Vec<(f64, DMatrix<f64>)>> {
    check_dim("initial covariance rows", lin.dim(), p0.nrows())?;
    check_dim("initial covariance columns", lin.dim(), p0.ncols())?;
    check_step(dt_fine, false)?;
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "horizon".into(),
            reason: format!("must be finite and nonnegative, got {horizon}"),
        });
    }
    let r_inv = lin
        .r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("observation noise".into()))?
        .inverse();
    let steps = (horizon / dt_fine).round() as usize;
    let h = dt_fine;
    let mut p = symmetrize(p0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, p.clone()));
    for k in 0..steps {
        let k1 = riccati_rhs(lin, &p, &r_inv);
        let k2 = riccati_rhs(lin, &(&p + &k1 * (0.5 * h)), &r_inv);
        let k3 = riccati_rhs(lin, &(&p + &k2 * (0.5 * h)), &r_inv);
        let k4 = riccati_rhs(lin, &(&p + &k3 * h), &r_inv);
        p = symmetrize(&(&p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        out.push(((k + 1) as f64 * h, p.clone()));
    }
    Ok(out)
}

/// Models a filter run needs.
#[derive(Debug, Clone, Copy)]
pub struct FilterModels<'a> {
    pub potential: &'a PotentialModel,
    pub observation: &'a ObservationModel,
}

/// Runs a filter over a uniform record sequence. The trajectory starts at
/// the first record's time (0 without records) and holds one belief more
/// than there are records.
pub fn run_filter(
    kind: FilterKind,
    models: FilterModels<'_>,
    q0: &GaussianBelief,
    records: &[ObservationRecord],
    method: ExpectationMethod,
    fp: &FixedPointConfig,
) -> Result<BeliefTrajectory> {
    check_dim("initial belief vs potential", models.potential.dim(), q0.dim())?;
    check_dim(
        "initial belief vs observation model",
        models.observation.state_dim(),
        q0.dim(),
    )?;
    check_uniform(records)?;
    let linear = match kind {
        FilterKind::KalmanBucy => Some(LinearModelPair::from_models(models.potential, models.observation)?),
        _ => None,
    };

    let t0 = records.first().map_or(0.0, |r| r.t);
    let mut traj = BeliefTrajectory {
        times: Vec::with_capacity(records.len() + 1),
        beliefs: Vec::with_capacity(records.len() + 1),
        flags: Vec::with_capacity(records.len()),
    };
    traj.times.push(t0);
    traj.beliefs.push(q0.clone());
    let mut q = q0.clone();
    for rec in records {
        let out = match kind {
            FilterKind::Cvkf {
                propagation,
                update,
            } => cvkf_step(
                &q,
                models.potential,
                models.observation,
                &rec.dz,
                rec.dt,
                propagation,
                update,
                method,
                fp,
            )?,
            FilterKind::KalmanBucy => {
                kalman_bucy_step(&q, linear.as_ref().expect("checked above"), &rec.dz, rec.dt)?
            }
            FilterKind::PropagationOnly(prop) => {
                jko_step(prop, &q, models.potential, rec.dt, method, fp)?
            }
            FilterKind::UpdateOnly(form) => {
                lmmr_step(form, &q, models.observation, &rec.dz, rec.dt, method, fp)?
            }
        };
        q = out.belief;
        traj.times.push(rec.t + rec.dt);
        traj.beliefs.push(q.clone());
        traj.flags.push(out.degenerate);
    }
    Ok(traj)
}

fn check_uniform(records: &[ObservationRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    for (k, rec) in records.iter().enumerate() {
        if !(rec.dt > 0.0 && rec.dt.is_finite()) {
            return Err(Error::InvalidRecords(format!("record {k} has step {}", rec.dt)));
        }
        if (rec.dt - first.dt).abs() > 1e-9 * first.dt {
            return Err(Error::InvalidRecords(format!(
                "record {k} has step {} but the first record has {}",
                rec.dt, first.dt
            )));
        }
        let expected = first.t + k as f64 * first.dt;
        if (rec.t - expected).abs() > 1e-6 * first.dt {
            return Err(Error::InvalidRecords(format!(
                "record {k} starts at {} instead of {expected}",
                rec.t
            )));
        }
    }
    Ok(())
}
