//! Ground truth and reference posteriors.
//!
//! Truth traces are Euler-Maruyama paths of the state and observation SDEs.
//! The bootstrap particle filter approximates the exact (non-Gaussian)
//! posterior and serves as the oracle for nonlinear scenarios.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, check_step, Error, Result};
use crate::filter::BeliefTrajectory;
use crate::gaussian::{GaussianBelief, PSD_FLOOR};
use crate::models::{ObservationModel, PotentialModel};

const STATE_STREAM: u64 = 0;
const OBS_STREAM: u64 = 1;

/// Observation increment `dz = z(t + dt) - z(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub t: f64,
    pub dt: f64,
    pub dz: DVector<f64>,
}

impl ObservationRecord {
    pub fn new(t: f64, dt: f64, dz: DVector<f64>) -> Result<Self> {
        check_step(dt, false)?;
        if !t.is_finite() || dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation record".into()));
        }
        Ok(Self { t, dt, dz })
    }
}

/// Simulated state path and the observation increments it generated.
/// `states[k]` is the state at `times[k]`; `records[k]` covers
/// `[times[k], times[k + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub records: Vec<ObservationRecord>,
    pub seed: u64,
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    check_step(dt, false)?;
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "horizon".into(),
            reason: format!("must be finite and nonnegative, got {horizon}"),
        });
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(Error::InvalidParameter {
            name: "horizon".into(),
            reason: format!("{horizon} is not an integer multiple of dt = {dt}"),
        });
    }
    Ok(steps as usize)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Euler-Maruyama simulation of
/// `x' = x - grad V(x) dt + sqrt(2 eps dt) xi` and
/// `dz = h(x) dt + sqrt(dt) R^1/2 eta`, with `h` at the step start.
pub fn simulate_truth(
    pmodel: &PotentialModel,
    omodel: &ObservationModel,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<TruthTrace> {
    let d = pmodel.dim();
    check_dim("initial state", d, x0.len())?;
    check_dim("observation model state", d, omodel.state_dim())?;
    let steps = step_count(horizon, dt)?;
    let m = omodel.obs_dim();
    let mut state_rng = stream_rng(seed, STATE_STREAM);
    let mut obs_rng = stream_rng(seed, OBS_STREAM);
    let diffusion = (2.0 * pmodel.epsilon() * dt).sqrt();
    let obs_scale = omodel.noise_sqrt() * dt.sqrt();

    let mut trace = TruthTrace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        records: Vec::with_capacity(steps),
        seed,
    };
    let mut x = x0.clone();
    trace.times.push(0.0);
    trace.states.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * dt;
        let eta = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut obs_rng));
        let dz = omodel.h(&x)? * dt + &obs_scale * eta;
        let xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut state_rng));
        x = &x - pmodel.grad(&x) * dt + xi * diffusion;
        let t_next = (k + 1) as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) || dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t: t_next });
        }
        trace.records.push(ObservationRecord { t, dt, dz });
        trace.times.push(t_next);
        trace.states.push(x.clone());
    }
    Ok(trace)
}

/// Weighted particles approximating the filtering posterior.
///
/// Each step draws from its own ChaCha8 stream derived from the seed and the
/// step count, so a given seed always reproduces the same ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    /// one column per particle
    particles: DMatrix<f64>,
    /// normalized so that their log-sum-exp is zero
    log_weights: Vec<f64>,
    seed: u64,
    steps: u64,
    resamples: usize,
    forced_resamples: usize,
}

impl ParticleEnsemble {
    /// `n` equally weighted draws from `q`.
    pub fn sample(q: &GaussianBelief, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter {
                name: "particles".into(),
                reason: format!("an ensemble needs at least 2 particles, got {n}"),
            });
        }
        let d = q.dim();
        let factor = match q.cov().clone().cholesky() {
            Some(c) => c.l(),
            None => crate::gaussian::sqrtm_psd(q.cov())?,
        };
        let mut rng = stream_rng(seed, 0);
        let mut particles = DMatrix::zeros(d, n);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            particles.set_column(i, &(q.mean() + &factor * &z));
        }
        Self::from_particles(particles, vec![-(n as f64).ln(); n], seed)
    }

    /// Ensemble from explicit particles (one per column) and log-weights.
    pub fn from_particles(particles: DMatrix<f64>, log_weights: Vec<f64>, seed: u64) -> Result<Self> {
        let n = particles.ncols();
        if n < 2 {
            return Err(Error::InvalidParameter {
                name: "particles".into(),
                reason: format!("an ensemble needs at least 2 particles, got {n}"),
            });
        }
        check_dim("log weights", n, log_weights.len())?;
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("particles".into()));
        }
        let mut ens = Self {
            particles,
            log_weights,
            seed,
            steps: 0,
            resamples: 0,
            forced_resamples: 0,
        };
        ens.normalize()?;
        Ok(ens)
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// Particles as an `N x d` matrix.
    pub fn particles(&self) -> DMatrix<f64> {
        self.particles.transpose()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resamples(&self) -> usize {
        self.resamples
    }

    /// Resamplings forced by total weight underflow.
    pub fn forced_resamples(&self) -> usize {
        self.forced_resamples
    }

    fn normalize(&mut self) -> Result<()> {
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateEnsemble("log-weights are not finite".into()));
        }
        let lse = max + self.log_weights.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for l in self.log_weights.iter_mut() {
            *l -= lse;
        }
        Ok(())
    }

    /// Normalized weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Effective sample size `1 / sum w_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|l| (2.0 * l).exp()).sum::<f64>()
    }

    /// Copy of the ensemble after one systematic resampling driven by `seed`.
    pub fn resampled(&self, seed: u64) -> ParticleEnsemble {
        let mut out = self.clone();
        out.resample(&mut stream_rng(seed, u64::MAX));
        out
    }

    /// Systematic resampling with a single uniform offset.
    fn resample(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.len();
        let weights = self.weights();
        let offset: f64 = rng.random::<f64>() / n as f64;
        let mut out = DMatrix::zeros(self.dim(), n);
        let mut cumulative = weights[0];
        let mut src = 0;
        for i in 0..n {
            let u = offset + i as f64 / n as f64;
            while u > cumulative && src + 1 < n {
                src += 1;
                cumulative += weights[src];
            }
            out.set_column(i, &self.particles.column(src));
        }
        self.particles = out;
        self.log_weights = vec![-(n as f64).ln(); n];
        self.resamples += 1;
    }
}

/// Total log-weight increment below which the ensemble counts as underflowed.
const UNDERFLOW_LOG_WEIGHT: f64 = -700.0;

/// Propagates every particle by one Euler-Maruyama step, reweights by
/// `-0.5 |dz - h(x) dt|^2_{(R dt)^-1}` at the propagated state, and resamples
/// systematically when the effective sample size drops below `N / 2`.
pub fn particle_oracle_step(
    ens: &ParticleEnsemble,
    pmodel: &PotentialModel,
    omodel: &ObservationModel,
    record: &ObservationRecord,
) -> Result<ParticleEnsemble> {
    let d = ens.dim();
    check_dim("ensemble vs potential", pmodel.dim(), d)?;
    check_dim("ensemble vs observation model", omodel.state_dim(), d)?;
    check_dim("observation increment", omodel.obs_dim(), record.dz.len())?;
    let dt = record.dt;
    let m = omodel.obs_dim();
    let mut out = ens.clone();
    out.steps += 1;
    let mut rng = stream_rng(ens.seed, out.steps);
    let diffusion = (2.0 * pmodel.epsilon() * dt).sqrt();
    let r_inv = omodel.noise_inv();
    let mut x = DVector::zeros(d);
    let mut innov = vec![0.0; m];
    for i in 0..out.len() {
        x.copy_from(&out.particles.column(i));
        let g = pmodel.grad(&x);
        for k in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x[k] += -g[k] * dt + diffusion * noise;
        }
        let h = omodel.h(&x)?;
        for k in 0..m {
            innov[k] = record.dz[k] - h[k] * dt;
        }
        let mut quad = 0.0;
        for a in 0..m {
            for b in 0..m {
                quad += innov[a] * r_inv[(a, b)] * innov[b];
            }
        }
        out.log_weights[i] -= 0.5 * quad / dt;
        out.particles.set_column(i, &x);
    }
    if out.particles.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { t: record.t + dt });
    }
    let max = out.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let forced = max < UNDERFLOW_LOG_WEIGHT;
    out.normalize()?;
    if forced {
        out.forced_resamples += 1;
    }
    if forced || out.ess() < out.len() as f64 / 2.0 {
        out.resample(&mut rng);
    }
    Ok(out)
}

/// Weighted mean and covariance with the unbiased `1 / (1 - sum w_i^2)`
/// normalization, floored to PSD.
pub fn ensemble_moments(ens: &ParticleEnsemble) -> Result<GaussianBelief> {
    let ess = ens.ess();
    if ess < 2.0 - 1e-9 {
        return Err(Error::DegenerateEnsemble(format!(
            "effective sample size {ess} is below 2"
        )));
    }
    let d = ens.dim();
    let w = ens.weights();
    let mut mean = DVector::zeros(d);
    for (i, wi) in w.iter().enumerate() {
        mean.axpy(*wi, &ens.particles.column(i), 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut dev = DVector::zeros(d);
    for (i, wi) in w.iter().enumerate() {
        dev.copy_from(&ens.particles.column(i));
        dev -= &mean;
        cov.ger(*wi, &dev, &dev, 1.0);
    }
    let sum_sq: f64 = w.iter().map(|wi| wi * wi).sum();
    cov /= 1.0 - sum_sq;
    Ok(GaussianBelief::new_floored(mean, cov)?.0)
}

/// Monte Carlo standard error of each coordinate of the weighted mean,
/// `sqrt(var_k / ESS)`.
pub fn ensemble_mean_standard_error(ens: &ParticleEnsemble) -> Result<DVector<f64>> {
    let moments = ensemble_moments(ens)?;
    let ess = ens.ess();
    Ok(moments.cov().diagonal().map(|v| (v / ess).sqrt()))
}

/// Accuracy and consistency of a filter run against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMetrics {
    /// `sqrt(mean_t |mu_t - x_t|^2)`
    pub rmse: f64,
    pub nees_mean: f64,
    /// `(x_t - mu_t)^T P_t^-1 (x_t - mu_t)`
    pub nees_series: Vec<f64>,
    /// Steps where `P_t` was singular and a floored inverse was used.
    pub singular_steps: Vec<usize>,
}

fn floored_inverse(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(p.clone());
    let d = p.nrows() as f64;
    let trace: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let floor = (PSD_FLOOR * trace / d).max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn metrics(traj: &BeliefTrajectory, truth: &TruthTrace) -> Result<FilterMetrics> {
    check_dim("trajectory vs truth length", truth.states.len(), traj.beliefs.len())?;
    for (k, (a, b)) in traj.times.iter().zip(&truth.times).enumerate() {
        if (a - b).abs() > 1e-9 * (1.0 + b.abs()) {
            return Err(Error::InvalidRecords(format!(
                "time grids differ at index {k}: {a} vs {b}"
            )));
        }
    }
    if traj.beliefs.is_empty() {
        return Err(Error::InvalidRecords("empty trajectory".into()));
    }
    let mut sq = 0.0;
    let mut nees_series = Vec::with_capacity(traj.beliefs.len());
    let mut singular_steps = Vec::new();
    for (k, (q, x)) in traj.beliefs.iter().zip(&truth.states).enumerate() {
        check_dim("truth state", q.dim(), x.len())?;
        let err = x - q.mean();
        sq += err.norm_squared();
        let nees = match q.cov().clone().cholesky() {
            Some(c) => c.solve(&err).dot(&err),
            None => {
                singular_steps.push(k);
                err.dot(&(floored_inverse(q.cov()) * &err))
            }
        };
        nees_series.push(nees);
    }
    let n = traj.beliefs.len() as f64;
    Ok(FilterMetrics {
        rmse: (sq / n).sqrt(),
        nees_mean: nees_series.iter().sum::<f64>() / n,
        nees_series,
        singular_steps,
    })
}
