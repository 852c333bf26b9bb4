//! Gaussian expectations `E_q[f(x)]` and the statistics built from them.
//!
//! Every method other than `ExactLinear` reduces to a weighted node set
//! `{(w_i, x_i)}`; all statistics of one call share the same nodes, so a
//! Monte Carlo step uses identical randomness for every integrand.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, check_step, Error, Result};
use crate::gaussian::{sqrtm_psd, symmetrize, GaussianBelief};
use crate::models::{ObservationModel, PotentialModel};

/// Largest state dimension accepted by tensorized Gauss-Hermite.
pub const GAUSS_HERMITE_MAX_DIM: usize = 4;

/// How expectations under a Gaussian are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpectationMethod {
    /// Closed forms; valid only for quadratic potentials and linear
    /// observation maps.
    ExactLinear,
    /// Symmetric `2d + 1` sigma points; `kappa = None` means `3 - d`.
    Unscented { kappa: Option<f64> },
    /// Tensor-product Gauss-Hermite rule with `order` nodes per axis.
    GaussHermite { order: usize },
    /// Plain Monte Carlo with a seeded ChaCha8 stream.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for ExpectationMethod {
    fn default() -> Self {
        ExpectationMethod::Unscented { kappa: None }
    }
}

impl fmt::Display for ExpectationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectationMethod::ExactLinear => write!(f, "exact-linear"),
            ExpectationMethod::Unscented { kappa: None } => write!(f, "unscented"),
            ExpectationMethod::Unscented { kappa: Some(k) } => write!(f, "unscented(kappa={k})"),
            ExpectationMethod::GaussHermite { order } => write!(f, "gauss-hermite({order})"),
            ExpectationMethod::MonteCarlo { samples, seed } => {
                write!(f, "monte-carlo(n={samples}, seed={seed})")
            }
        }
    }
}

/// Values that can be averaged over a node set.
pub trait Moment: Sized {
    fn scaled(&self, w: f64) -> Self;
    fn add_scaled(&mut self, other: &Self, w: f64);
    fn same_shape(&self, other: &Self) -> bool;
    fn all_finite(&self) -> bool;
}

impl Moment for f64 {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += w * other;
    }
    fn same_shape(&self, _: &Self) -> bool {
        true
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Moment for DVector<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.axpy(w, other, 1.0);
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len()
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Moment for DMatrix<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += other * w;
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Covariance factor `L` with `L L^T = P`: Cholesky when it exists, the
/// symmetric square root otherwise (singular but PSD covariances).
fn cov_factor(q: &GaussianBelief) -> Result<DMatrix<f64>> {
    match q.cov().clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => sqrtm_psd(q.cov()),
    }
}

/// Probabilists' Gauss-Hermite nodes and weights (weights sum to one) via
/// the Golub-Welsch eigenvalue problem, sorted by node.
pub fn gauss_hermite_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

enum Nodes {
    Weighted(Vec<(f64, DVector<f64>)>),
    Sampled {
        mean: DVector<f64>,
        factor: DMatrix<f64>,
        samples: usize,
        seed: u64,
    },
}

/// Weighted nodes representing a Gaussian for one expectation method.
pub struct NodeSet {
    nodes: Nodes,
}

impl NodeSet {
    pub fn new(q: &GaussianBelief, method: ExpectationMethod) -> Result<Self> {
        let d = q.dim();
        let mu = q.mean();
        let nodes = match method {
            ExpectationMethod::ExactLinear => {
                return Err(Error::IncompatibleMethod(
                    "exact-linear has no node set; it only applies to linear model statistics".into(),
                ))
            }
            ExpectationMethod::Unscented { kappa } => {
                let kappa = kappa.unwrap_or(3.0 - d as f64);
                let spread = d as f64 + kappa;
                if !(spread > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "kappa".into(),
                        reason: format!("d + kappa must be positive, got {spread}"),
                    });
                }
                let l = cov_factor(q)? * spread.sqrt();
                let mut nodes = Vec::with_capacity(2 * d + 1);
                nodes.push((kappa / spread, mu.clone()));
                let w = 0.5 / spread;
                for i in 0..d {
                    let col = l.column(i);
                    nodes.push((w, mu + col));
                    nodes.push((w, mu - col));
                }
                Nodes::Weighted(nodes)
            }
            ExpectationMethod::GaussHermite { order } => {
                if !(2..=10).contains(&order) {
                    return Err(Error::InvalidParameter {
                        name: "order".into(),
                        reason: format!("Gauss-Hermite order must be in 2..=10, got {order}"),
                    });
                }
                if d > GAUSS_HERMITE_MAX_DIM {
                    return Err(Error::IncompatibleMethod(format!(
                        "Gauss-Hermite accepts d <= {GAUSS_HERMITE_MAX_DIM}, got d = {d}"
                    )));
                }
                let (xs, ws) = gauss_hermite_rule(order);
                let l = cov_factor(q)?;
                let count = order.pow(d as u32);
                let mut nodes = Vec::with_capacity(count);
                let mut idx = vec![0usize; d];
                for _ in 0..count {
                    let z = DVector::from_fn(d, |i, _| xs[idx[i]]);
                    let w: f64 = idx.iter().map(|&k| ws[k]).product();
                    nodes.push((w, mu + &l * z));
                    for slot in idx.iter_mut() {
                        *slot += 1;
                        if *slot < order {
                            break;
                        }
                        *slot = 0;
                    }
                }
                Nodes::Weighted(nodes)
            }
            ExpectationMethod::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return Err(Error::InvalidParameter {
                        name: "samples".into(),
                        reason: "Monte Carlo needs at least one sample".into(),
                    });
                }
                Nodes::Sampled {
                    mean: mu.clone(),
                    factor: cov_factor(q)?,
                    samples,
                    seed,
                }
            }
        };
        Ok(Self { nodes })
    }

    /// Calls `f(weight, node)` for every node in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(f64, &DVector<f64>) -> Result<()>) -> Result<()> {
        match &self.nodes {
            Nodes::Weighted(nodes) => {
                for (w, x) in nodes {
                    f(*w, x)?;
                }
            }
            Nodes::Sampled {
                mean,
                factor,
                samples,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let w = 1.0 / *samples as f64;
                let d = mean.len();
                let mut z = DVector::zeros(d);
                let mut x = DVector::zeros(d);
                for _ in 0..*samples {
                    for zi in z.iter_mut() {
                        *zi = StandardNormal.sample(&mut rng);
                    }
                    x.copy_from(mean);
                    x.gemv(1.0, factor, &z, 1.0);
                    f(w, &x)?;
                }
            }
        }
        Ok(())
    }

    /// `E[f(x)]` over this node set.
    pub fn expect<T: Moment>(&self, mut f: impl FnMut(&DVector<f64>) -> Result<T>) -> Result<T> {
        let mut acc: Option<T> = None;
        self.visit(|w, x| {
            let v = f(x)?;
            if !v.all_finite() {
                return Err(Error::NonFinite("integrand".into()));
            }
            match acc.as_mut() {
                None => acc = Some(v.scaled(w)),
                Some(a) => {
                    if !a.same_shape(&v) {
                        return Err(Error::InvalidParameter {
                            name: "integrand".into(),
                            reason: "output shape changed between nodes".into(),
                        });
                    }
                    a.add_scaled(&v, w);
                }
            }
            Ok(())
        })?;
        acc.ok_or_else(|| Error::NonFinite("empty node set".into()))
    }
}

/// `E_q[f(x)]` under the chosen method.
pub fn expect<T: Moment>(
    f: impl FnMut(&DVector<f64>) -> Result<T>,
    q: &GaussianBelief,
    method: ExpectationMethod,
) -> Result<T> {
    NodeSet::new(q, method)?.expect(f)
}

/// Propagation statistics `b = -E[grad V]`, `A = -E[hess V]` (symmetrized).
#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
}

/// Measurement statistics `dC = E[J^T R^-1 (dz - h dt)]` and
/// `dH = E[(x - mu_ref)(dz - h dt)^T R^-1 J]`, `J` the Jacobian of `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub dc: DVector<f64>,
    pub dh: DMatrix<f64>,
}

/// Expected score and Hessian of `log p(dz | x)` with
/// `p(dz | x) = N(h(x) dt, R dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodStats {
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn drift_stats(
    model: &PotentialModel,
    q: &GaussianBelief,
    method: ExpectationMethod,
) -> Result<DriftStats> {
    check_dim("belief vs potential", model.dim(), q.dim())?;
    if method == ExpectationMethod::ExactLinear {
        let k = model.quadratic_form().ok_or_else(|| {
            Error::IncompatibleMethod("exact-linear requires a quadratic potential".into())
        })?;
        return Ok(DriftStats {
            b: -(k * q.mean()),
            a: -k.clone(),
        });
    }
    let nodes = NodeSet::new(q, method)?;
    let d = q.dim();
    let mut b = DVector::zeros(d);
    let mut a = DMatrix::zeros(d, d);
    nodes.visit(|w, x| {
        b.axpy(-w, &model.grad(x), 1.0);
        a -= model.hess(x) * w;
        Ok(())
    })?;
    if !(b.all_finite() && a.all_finite()) {
        return Err(Error::NonFinite("drift statistics".into()));
    }
    Ok(DriftStats {
        b,
        a: symmetrize(&a),
    })
}

fn check_update_inputs(
    model: &ObservationModel,
    q: &GaussianBelief,
    dz: &DVector<f64>,
    dt: f64,
) -> Result<()> {
    check_dim("belief vs observation model", model.state_dim(), q.dim())?;
    check_dim("observation increment", model.obs_dim(), dz.len())?;
    check_step(dt, false)?;
    if !dz.all_finite() {
        return Err(Error::NonFinite("observation increment".into()));
    }
    Ok(())
}

pub fn update_stats(
    model: &ObservationModel,
    q: &GaussianBelief,
    mu_ref: &DVector<f64>,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
) -> Result<UpdateStats> {
    check_update_inputs(model, q, dz, dt)?;
    check_dim("reference mean", q.dim(), mu_ref.len())?;
    let r_inv = model.noise_inv();
    if method == ExpectationMethod::ExactLinear {
        let g = model.linear_map().ok_or_else(|| {
            Error::IncompatibleMethod("exact-linear requires a linear observation map".into())
        })?;
        let innov = dz - g * q.mean() * dt;
        let dc = g.transpose() * r_inv * &innov;
        let cross = (q.mean() - mu_ref) * innov.transpose() - q.cov() * g.transpose() * dt;
        return Ok(UpdateStats {
            dc,
            dh: cross * r_inv * g,
        });
    }
    let nodes = NodeSet::new(q, method)?;
    let d = q.dim();
    let mut dc = DVector::zeros(d);
    let mut dh = DMatrix::zeros(d, d);
    nodes.visit(|w, x| {
        let jac = model.jac(x)?;
        let weighted = r_inv * (dz - model.h(x)? * dt);
        dc.gemv_tr(w, &jac, &weighted, 1.0);
        let row = weighted.transpose() * &jac;
        dh += (x - mu_ref) * row * w;
        Ok(())
    })?;
    if !(dc.all_finite() && dh.all_finite()) {
        return Err(Error::NonFinite("update statistics".into()));
    }
    Ok(UpdateStats { dc, dh })
}

/// Expected score and Hessian of the observation log-likelihood under `q`.
///
/// The Hessian is obtained without second derivatives of `h` through the
/// Gaussian integration-by-parts identity
/// `E[hess f] = P^-1 E[(x - mu) grad f^T]`, then symmetrized.
pub fn likelihood_stats(
    model: &ObservationModel,
    q: &GaussianBelief,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
) -> Result<LikelihoodStats> {
    check_update_inputs(model, q, dz, dt)?;
    let r_inv = model.noise_inv();
    if method == ExpectationMethod::ExactLinear {
        let g = model.linear_map().ok_or_else(|| {
            Error::IncompatibleMethod("exact-linear requires a linear observation map".into())
        })?;
        let gt_rinv = g.transpose() * r_inv;
        return Ok(LikelihoodStats {
            score: &gt_rinv * (dz - g * q.mean() * dt),
            hessian: -(gt_rinv * g) * dt,
        });
    }
    let nodes = NodeSet::new(q, method)?;
    let d = q.dim();
    let mut score = DVector::zeros(d);
    let mut cross = DMatrix::zeros(d, d);
    let mu = q.mean();
    nodes.visit(|w, x| {
        let jac = model.jac(x)?;
        let s = jac.transpose() * (r_inv * (dz - model.h(x)? * dt));
        score.axpy(w, &s, 1.0);
        cross += (x - mu) * s.transpose() * w;
        Ok(())
    })?;
    let hessian = symmetrize(&(q.precision()? * cross));
    if !(score.all_finite() && hessian.all_finite()) {
        return Err(Error::NonFinite("likelihood statistics".into()));
    }
    Ok(LikelihoodStats { score, hessian })
}

/// `E_q[0.5 |dz - h(x) dt|^2_{(R dt)^-1}]`, the expected observation misfit.
pub fn expected_misfit(
    model: &ObservationModel,
    q: &GaussianBelief,
    dz: &DVector<f64>,
    dt: f64,
    method: ExpectationMethod,
) -> Result<f64> {
    check_update_inputs(model, q, dz, dt)?;
    let r_inv = model.noise_inv();
    if method == ExpectationMethod::ExactLinear {
        let g = model.linear_map().ok_or_else(|| {
            Error::IncompatibleMethod("exact-linear requires a linear observation map".into())
        })?;
        let innov = dz - g * q.mean() * dt;
        let spread = (g.transpose() * r_inv * g * q.cov()).trace() * dt * dt;
        return Ok(0.5 * (innov.dot(&(r_inv * &innov)) + spread) / dt);
    }
    expect(
        |x| {
            let innov = dz - model.h(x)? * dt;
            Ok(0.5 * innov.dot(&(r_inv * &innov)) / dt)
        },
        q,
        method,
    )
}

/// `E_q[V(x)]`.
pub fn expected_potential(
    model: &PotentialModel,
    q: &GaussianBelief,
    method: ExpectationMethod,
) -> Result<f64> {
    check_dim("belief vs potential", model.dim(), q.dim())?;
    if method == ExpectationMethod::ExactLinear {
        let k = model.quadratic_form().ok_or_else(|| {
            Error::IncompatibleMethod("exact-linear requires a quadratic potential".into())
        })?;
        return Ok(0.5 * (q.mean().dot(&(k * q.mean())) + (k * q.cov()).trace()));
    }
    expect(|x| Ok(model.potential(x)), q, method)
}
