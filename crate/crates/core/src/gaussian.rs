//! Gaussian beliefs and the information-geometric primitives used to study
//! them: Kullback-Leibler divergence, the Bures-Wasserstein distance and the
//! Fisher information matrix of the Gaussian family.
//!
//! Covariances are kept symmetric and positive semidefinite. Construction
//! re-symmetrizes and raises eigenvalues below `1e-12 * trace / d` to that
//! floor; the step functions of the filter report when the floor engaged.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative eigenvalue floor applied on construction.
pub const PSD_FLOOR: f64 = 1e-12;

/// Eigenvalues more negative than this (relative to `trace / d`) are treated
/// as a genuinely indefinite input rather than round-off.
const INDEFINITE_TOL: f64 = 1e-10;

/// `(P + P^T) / 2`.
pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Largest absolute entry, 0 for an empty matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// with eigenvalues clamped at zero.
///
/// Fails when the smallest eigenvalue is below `-1e-10 * trace / d`.
pub fn sqrtm_psd(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(p));
    let d = p.nrows().max(1) as f64;
    let scale = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum::<f64>() / d;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -INDEFINITE_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveSemidefinite(format!(
            "matrix passed to square root (smallest eigenvalue {min:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Floors the spectrum of a symmetric matrix. Returns the floored matrix and
/// whether any eigenvalue had to be raised.
fn floor_spectrum(p: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d = p.nrows();
    if d == 0 {
        return (p, false);
    }
    let eig = SymmetricEigen::new(p.clone());
    let trace: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let floor = PSD_FLOOR * trace / d as f64;
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (p, false);
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

/// A Gaussian belief `N(mean, cov)`, the state carried by every filter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Builds a belief from a mean and a covariance.
    ///
    /// The covariance is symmetrized and small negative eigenvalues from
    /// round-off are floored. A clearly indefinite covariance is rejected.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let sym = Self::validated(&mean, cov)?;
        let eig = SymmetricEigen::new(sym.clone());
        let d = mean.len().max(1) as f64;
        let scale = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum::<f64>() / d;
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -INDEFINITE_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveSemidefinite(format!(
                "covariance (smallest eigenvalue {min:e})"
            )));
        }
        let (cov, _) = floor_spectrum(sym);
        Ok(Self { mean, cov })
    }

    /// Builds a belief, flooring any eigenvalue below the PSD floor, and
    /// reports whether the floor engaged. Used by the step functions, where
    /// an indefinite intermediate covariance is a degeneracy, not an error.
    pub fn new_floored(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<(Self, bool)> {
        let sym = Self::validated(&mean, cov)?;
        let (cov, engaged) = floor_spectrum(sym);
        Ok((Self { mean, cov }, engaged))
    }

    fn validated(mean: &DVector<f64>, cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter {
                name: "mean".into(),
                reason: "dimension must be positive".into(),
            });
        }
        check_dim("covariance rows", d, cov.nrows())?;
        check_dim("covariance columns", d, cov.ncols())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief mean".into()));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief covariance".into()));
        }
        Ok(symmetrize(&cov))
    }

    /// Scalar belief `N(mean, var)`.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Precision matrix `P^-1`; fails for a singular covariance.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        self.cov
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::NotPositiveDefinite("belief covariance".into()))
    }

    /// Largest absolute difference over mean and covariance entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let dm = (&self.mean - &other.mean).amax();
        let dp = max_abs(&(&self.cov - &other.cov));
        dm.max(dp)
    }
}

/// Flat parameter vector `theta = (mean, vech(cov))`, where `vech` stacks the
/// upper triangle row by row: `P[0][0], P[0][1], .., P[0][d-1], P[1][1], ..`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamVector {
    dim: usize,
    theta: DVector<f64>,
}

/// Number of entries in `theta` for a `d`-dimensional Gaussian.
pub fn param_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Upper-triangle index pairs in `vech` order.
pub fn vech_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            pairs.push((i, j));
        }
    }
    pairs
}

impl GaussianParamVector {
    pub fn from_belief(q: &GaussianBelief) -> Self {
        let d = q.dim();
        let mut theta = DVector::zeros(param_len(d));
        theta.rows_mut(0, d).copy_from(q.mean());
        for (k, (i, j)) in vech_pairs(d).into_iter().enumerate() {
            theta[d + k] = q.cov()[(i, j)];
        }
        Self { dim: d, theta }
    }

    /// Wraps a raw vector; its length must be `d + d(d+1)/2`.
    pub fn from_vector(dim: usize, theta: DVector<f64>) -> Result<Self> {
        check_dim("parameter vector", param_len(dim), theta.len())?;
        Ok(Self { dim, theta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.theta
    }

    fn split(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mean = self.theta.rows(0, d).into_owned();
        let mut cov = DMatrix::zeros(d, d);
        for (k, (i, j)) in vech_pairs(d).into_iter().enumerate() {
            cov[(i, j)] = self.theta[d + k];
            cov[(j, i)] = self.theta[d + k];
        }
        (mean, cov)
    }

    /// Rebuilds the belief (same validation as [`GaussianBelief::new`]).
    pub fn to_belief(&self) -> Result<GaussianBelief> {
        let (mean, cov) = self.split();
        GaussianBelief::new(mean, cov)
    }

    /// Rebuilds the belief, requiring a strictly positive definite covariance.
    fn to_belief_pd(&self) -> Result<GaussianBelief> {
        let (mean, cov) = self.split();
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("perturbed covariance".into()));
        }
        GaussianBelief::new(mean, cov)
    }
}

/// Closed-form `KL(q || r)` between Gaussians.
///
/// Evaluated as `0.5 * (sum(l - 1 - ln l) + |L^-1 (mu_q - mu_r)|^2)` where `l`
/// are the eigenvalues of `L^-1 P_q L^-T` and `L L^T = P_r`, which is exact
/// zero for `q == r`.
pub fn kl_divergence(q: &GaussianBelief, r: &GaussianBelief) -> Result<f64> {
    check_dim("KL arguments", r.dim(), q.dim())?;
    let chol = r
        .cov()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("reference covariance of KL".into()))?;
    let l = chol.l();
    let diff = q.mean() - r.mean();
    let whitened = l
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::NotPositiveDefinite("reference covariance of KL".into()))?;
    let half = l
        .solve_lower_triangular(q.cov())
        .ok_or_else(|| Error::NotPositiveDefinite("reference covariance of KL".into()))?;
    let m = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("reference covariance of KL".into()))?;
    let eig = SymmetricEigen::new(symmetrize(&m));
    let mut total = whitened.norm_squared();
    for &lambda in eig.eigenvalues.iter() {
        if lambda <= 0.0 {
            return Err(Error::NotPositiveDefinite("first argument of KL".into()));
        }
        let x = lambda - 1.0;
        total += x - x.ln_1p();
    }
    Ok((0.5 * total).max(0.0))
}

/// Squared Bures metric `Tr(P + Q - 2 (P^1/2 Q P^1/2)^1/2)` on raw PSD matrices.
pub fn bures_sq(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    check_dim("Bures arguments", p.nrows(), q.nrows())?;
    let root = sqrtm_psd(p)?;
    // validates q as PSD as well
    sqrtm_psd(q)?;
    let inner = symmetrize(&(&root * q * &root));
    let cross = sqrtm_psd(&inner)?.trace();
    Ok((p.trace() + q.trace() - 2.0 * cross).max(0.0))
}

/// Squared Bures-Wasserstein distance `|mu_q - mu_r|^2 + B^2(P_q, P_r)`.
pub fn bures_wasserstein_distance_sq(q: &GaussianBelief, r: &GaussianBelief) -> Result<f64> {
    check_dim("Bures-Wasserstein arguments", q.dim(), r.dim())?;
    let mean_term = (q.mean() - r.mean()).norm_squared();
    Ok(mean_term + bures_sq(q.cov(), r.cov())?)
}

/// Fisher information of the Gaussian family in `(mean, vech(cov))`
/// coordinates.
///
/// The mean block is `P^-1`, the cross block vanishes and the covariance
/// block is `0.5 * Tr(P^-1 E_a P^-1 E_b)` with `E_a` the symmetric basis
/// matrix of the `a`-th `vech` coordinate.
pub fn fisher_matrix(q: &GaussianBelief) -> Result<DMatrix<f64>> {
    let d = q.dim();
    let s = symmetrize(&q.precision()?);
    let n = param_len(d);
    let mut f = DMatrix::zeros(n, n);
    f.view_mut((0, 0), (d, d)).copy_from(&s);

    let basis: Vec<Vec<(usize, usize)>> = vech_pairs(d)
        .into_iter()
        .map(|(i, j)| if i == j { vec![(i, i)] } else { vec![(i, j), (j, i)] })
        .collect();
    for (a, ea) in basis.iter().enumerate() {
        for (b, eb) in basis.iter().enumerate().skip(a) {
            // Tr(S e_p e_q^T S e_r e_s^T) = S[s][p] * S[q][r]
            let mut acc = 0.0;
            for &(p, qq) in ea {
                for &(r, ss) in eb {
                    acc += s[(ss, p)] * s[(qq, r)];
                }
            }
            f[(d + a, d + b)] = 0.5 * acc;
            f[(d + b, d + a)] = 0.5 * acc;
        }
    }
    Ok(f)
}

/// `KL(q + delta || q) - 0.5 * delta^T F(q) delta`, the remainder of the
/// quadratic expansion of the KL divergence around `q`.
pub fn kl_quadratic_residual(q: &GaussianBelief, delta: &GaussianParamVector) -> Result<f64> {
    check_dim("perturbation", q.dim(), delta.dim())?;
    let base = GaussianParamVector::from_belief(q);
    let shifted = GaussianParamVector::from_vector(q.dim(), base.as_vector() + delta.as_vector())?;
    let perturbed = shifted.to_belief_pd()?;
    let f = fisher_matrix(q)?;
    let dv = delta.as_vector();
    let quad = 0.5 * dv.dot(&(&f * dv));
    Ok(kl_divergence(&perturbed, q)? - quad)
}
