//! Problem definitions: Langevin dynamics `dx = -grad V(x) dt + sqrt(2 eps) dB`
//! and observation processes `dz = h(x) dt + sqrt(R) dW`, plus the built-in
//! scenario library.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{max_abs, symmetrize};

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ObsFn = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;
pub type ObsJacFn = Arc<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;

/// Langevin dynamics driven by a potential `V` with scalar diffusion `eps`
/// (`Q = 2 eps I`). General drifts are not representable.
#[derive(Clone)]
pub struct PotentialModel {
    dim: usize,
    potential: ScalarFn,
    grad: VectorFn,
    hess: MatrixFn,
    epsilon: f64,
    quadratic: Option<DMatrix<f64>>,
}

impl fmt::Debug for PotentialModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialModel")
            .field("dim", &self.dim)
            .field("epsilon", &self.epsilon)
            .field("quadratic", &self.quadratic)
            .finish_non_exhaustive()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "epsilon".into(),
            reason: format!("diffusion intensity must be finite and nonnegative, got {epsilon}"),
        });
    }
    Ok(())
}

impl PotentialModel {
    pub fn new(
        dim: usize,
        potential: ScalarFn,
        grad: VectorFn,
        hess: MatrixFn,
        epsilon: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim".into(),
                reason: "state dimension must be positive".into(),
            });
        }
        check_epsilon(epsilon)?;
        Ok(Self {
            dim,
            potential,
            grad,
            hess,
            epsilon,
            quadratic: None,
        })
    }

    /// `V(x) = 0.5 x^T K x` with symmetric `K`.
    pub fn quadratic(k: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let d = k.nrows();
        check_dim("potential matrix columns", d, k.ncols())?;
        if max_abs(&(&k - k.transpose())) > 1e-12 * (1.0 + max_abs(&k)) {
            return Err(Error::InvalidParameter {
                name: "K".into(),
                reason: "quadratic potential matrix must be symmetric".into(),
            });
        }
        let k = symmetrize(&k);
        let (kv, kg, kh) = (k.clone(), k.clone(), k.clone());
        let mut model = Self::new(
            d,
            Arc::new(move |x| 0.5 * x.dot(&(&kv * x))),
            Arc::new(move |x| &kg * x),
            Arc::new(move |_| kh.clone()),
            epsilon,
        )?;
        model.quadratic = Some(k);
        Ok(model)
    }

    /// Pure diffusion, `V = 0`.
    pub fn free(dim: usize, epsilon: f64) -> Result<Self> {
        Self::quadratic(DMatrix::zeros(dim, dim), epsilon)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `K` when the potential is declared quadratic (`grad V = K x`).
    pub fn quadratic_form(&self) -> Option<&DMatrix<f64>> {
        self.quadratic.as_ref()
    }

    pub fn potential(&self, x: &DVector<f64>) -> f64 {
        (self.potential)(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hess)(x)
    }

    /// Largest relative deviations of `grad` from central differences of `V`,
    /// of `hess` from central differences of `grad`, and of `hess` from
    /// symmetry, over the given points.
    pub fn finite_difference_check(&self, points: &[DVector<f64>]) -> FdReport {
        let mut report = FdReport::default();
        for x in points {
            let g = self.grad(x);
            let h = self.hess(x);
            let step = 1e-5 * (1.0 + x.amax());
            let mut g_fd = DVector::zeros(self.dim);
            let mut h_fd = DMatrix::zeros(self.dim, self.dim);
            for i in 0..self.dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                g_fd[i] = (self.potential(&xp) - self.potential(&xm)) / (2.0 * step);
                let col = (self.grad(&xp) - self.grad(&xm)) / (2.0 * step);
                h_fd.set_column(i, &col);
            }
            report.value = report.value.max(relative_gap(&g, &g_fd));
            report.derivative = report
                .derivative
                .max(max_abs(&(&h - &h_fd)) / (1.0 + max_abs(&h)));
            report.asymmetry = report.asymmetry.max(max_abs(&(&h - h.transpose())));
        }
        report
    }
}

/// Worst-case deviations found by a finite-difference consistency check.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdReport {
    /// first derivative vs differences of the function
    pub value: f64,
    /// second derivative vs differences of the first (0 for observations)
    pub derivative: f64,
    pub asymmetry: f64,
}

fn relative_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / (1.0 + a.amax())
}

/// Observation process `dz = h(x) dt + sqrt(R) dW`.
#[derive(Clone)]
pub struct ObservationModel {
    state_dim: usize,
    obs_dim: usize,
    h: ObsFn,
    jac: ObsJacFn,
    noise: DMatrix<f64>,
    noise_inv: DMatrix<f64>,
    noise_sqrt: DMatrix<f64>,
    linear: Option<DMatrix<f64>>,
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationModel")
            .field("state_dim", &self.state_dim)
            .field("obs_dim", &self.obs_dim)
            .field("noise", &self.noise)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

impl ObservationModel {
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        h: ObsFn,
        jac: ObsJacFn,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        if state_dim == 0 || obs_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim".into(),
                reason: "state and observation dimensions must be positive".into(),
            });
        }
        check_dim("noise rows", obs_dim, noise.nrows())?;
        check_dim("noise columns", obs_dim, noise.ncols())?;
        if noise.iter().any(|v| !v.is_finite())
            || max_abs(&(&noise - noise.transpose())) > 1e-12 * (1.0 + max_abs(&noise))
        {
            return Err(Error::InvalidParameter {
                name: "R".into(),
                reason: "observation noise must be finite and symmetric".into(),
            });
        }
        let noise = symmetrize(&noise);
        let chol = noise.clone().cholesky().ok_or_else(|| Error::InvalidParameter {
            name: "R".into(),
            reason: "observation noise must be positive definite".into(),
        })?;
        Ok(Self {
            state_dim,
            obs_dim,
            h,
            jac,
            noise_inv: chol.inverse(),
            noise_sqrt: chol.l(),
            noise,
            linear: None,
        })
    }

    /// `h(x) = G x`.
    pub fn linear(g: DMatrix<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let (gh, gj) = (g.clone(), g.clone());
        let mut model = Self::new(
            g.ncols(),
            g.nrows(),
            Arc::new(move |x| Ok(&gh * x)),
            Arc::new(move |_| Ok(gj.clone())),
            noise,
        )?;
        model.linear = Some(g);
        Ok(model)
    }

    /// The uninformative map `h = 0` with a scalar unit-noise channel.
    pub fn null(state_dim: usize) -> Result<Self> {
        Self::linear(DMatrix::zeros(1, state_dim), DMatrix::identity(1, 1))
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn noise_inv(&self) -> &DMatrix<f64> {
        &self.noise_inv
    }

    /// Lower Cholesky factor of `R`.
    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.noise_sqrt
    }

    /// `G` when the observation map is declared linear.
    pub fn linear_map(&self) -> Option<&DMatrix<f64>> {
        self.linear.as_ref()
    }

    pub fn h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.h)(x)
    }

    pub fn jac(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (self.jac)(x)
    }

    /// Relative deviation of `jac` from central differences of `h`.
    pub fn finite_difference_check(&self, points: &[DVector<f64>]) -> Result<FdReport> {
        let mut report = FdReport::default();
        for x in points {
            let j = self.jac(x)?;
            let step = 1e-6 * (1.0 + x.amax());
            let mut j_fd = DMatrix::zeros(self.obs_dim, self.state_dim);
            for i in 0..self.state_dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                j_fd.set_column(i, &((self.h(&xp)? - self.h(&xm)?) / (2.0 * step)));
            }
            report.value = report.value.max(max_abs(&(&j - &j_fd)) / (1.0 + max_abs(&j)));
        }
        Ok(report)
    }
}

/// Linear-Gaussian system `dx = F x dt + sqrt(2 eps) dB`, `dz = G x dt + sqrt(R) dW`.
///
/// As a Langevin system `V(x) = -0.5 x^T F x`, so `F` must be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelPair {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub epsilon: f64,
    pub r: DMatrix<f64>,
}

impl LinearModelPair {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, epsilon: f64, r: DMatrix<f64>) -> Result<Self> {
        let d = f.nrows();
        check_dim("drift matrix columns", d, f.ncols())?;
        check_dim("observation matrix columns", d, g.ncols())?;
        check_dim("noise rows", g.nrows(), r.nrows())?;
        check_dim("noise columns", g.nrows(), r.ncols())?;
        check_epsilon(epsilon)?;
        if max_abs(&(&f - f.transpose())) > 1e-12 * (1.0 + max_abs(&f)) {
            return Err(Error::InvalidParameter {
                name: "F".into(),
                reason: "drift matrix must be symmetric to derive from a potential".into(),
            });
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter {
                name: "R".into(),
                reason: "observation noise must be positive definite".into(),
            });
        }
        Ok(Self { f, g, epsilon, r })
    }

    /// Scalar system `(F, G, eps, R)`.
    pub fn scalar(f: f64, g: f64, epsilon: f64, r: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(f), m(g), epsilon, m(r))
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn to_models(&self) -> Result<(PotentialModel, ObservationModel)> {
        Ok((
            PotentialModel::quadratic(-&self.f, self.epsilon)?,
            ObservationModel::linear(self.g.clone(), self.r.clone())?,
        ))
    }

    /// Recovers the linear system from models that declare a quadratic
    /// potential and a linear observation map.
    pub fn from_models(pmodel: &PotentialModel, omodel: &ObservationModel) -> Result<Self> {
        let k = pmodel.quadratic_form().ok_or_else(|| {
            Error::IncompatibleMethod("potential is not declared quadratic".into())
        })?;
        let g = omodel.linear_map().ok_or_else(|| {
            Error::IncompatibleMethod("observation map is not declared linear".into())
        })?;
        Self::new(-k, g.clone(), pmodel.epsilon(), omodel.noise().clone())
    }
}

/// Documentation for one scenario parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDoc {
    pub name: &'static str,
    pub default: f64,
    pub doc: &'static str,
}

/// Documentation for a built-in scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: &'static [ParamDoc],
}

const EPS_DOC: &str = "diffusion intensity, Q = 2 eps I (must be > 0)";

pub const SCENARIOS: &[ScenarioInfo] = &[
    ScenarioInfo {
        name: "linear-1d",
        summary: "V(x) = k x^2 / 2, h(x) = h x",
        params: &[
            ParamDoc { name: "k", default: 1.0, doc: "potential stiffness (>= 0)" },
            ParamDoc { name: "h", default: 1.0, doc: "observation gain" },
            ParamDoc { name: "r", default: 1.0, doc: "observation noise variance (> 0)" },
            ParamDoc { name: "epsilon", default: 0.5, doc: EPS_DOC },
        ],
    },
    ScenarioInfo {
        name: "linear-2d",
        summary: "V(x) = x^T K x / 2 with K = [[k11, k12], [k12, k22]], h(x) = x, R = r I",
        params: &[
            ParamDoc { name: "k11", default: 1.0, doc: "potential matrix entry (K must be PSD)" },
            ParamDoc { name: "k12", default: 0.5, doc: "potential matrix off-diagonal entry" },
            ParamDoc { name: "k22", default: 2.0, doc: "potential matrix entry" },
            ParamDoc { name: "r", default: 1.0, doc: "observation noise variance per channel (> 0)" },
            ParamDoc { name: "epsilon", default: 0.5, doc: EPS_DOC },
        ],
    },
    ScenarioInfo {
        name: "double-well-1d",
        summary: "V(x) = x^4 / 4 - x^2 / 2, h(x) = x",
        params: &[
            ParamDoc { name: "r", default: 1.0, doc: "observation noise variance (> 0)" },
            ParamDoc { name: "epsilon", default: 0.5, doc: EPS_DOC },
        ],
    },
    ScenarioInfo {
        name: "bearings-2d",
        summary: "V(x) = k |x - c|^2 / 2, h(x) = atan2(x2, x1); undefined within 1e-8 of the origin",
        params: &[
            ParamDoc { name: "k", default: 1.0, doc: "isotropic potential stiffness (>= 0)" },
            ParamDoc { name: "cx", default: 2.0, doc: "first coordinate of the potential minimum c" },
            ParamDoc { name: "cy", default: 0.0, doc: "second coordinate of the potential minimum c" },
            ParamDoc { name: "r", default: 0.05, doc: "bearing noise variance (> 0)" },
            ParamDoc { name: "epsilon", default: 0.1, doc: EPS_DOC },
        ],
    },
];

/// Radius around the origin where bearings are rejected.
pub const BEARING_GUARD: f64 = 1e-8;

/// Resolves scenario parameters against their defaults. Unknown keys are
/// rejected.
pub fn resolve_params(name: &str, params: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let info = SCENARIOS
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownScenario(name.to_string()))?;
    for key in params.keys() {
        if !info.params.iter().any(|p| p.name == key) {
            return Err(Error::InvalidParameter {
                name: key.clone(),
                reason: format!("not a parameter of scenario `{name}`"),
            });
        }
    }
    let mut out = BTreeMap::new();
    for p in info.params {
        let v = params.get(p.name).copied().unwrap_or(p.default);
        if !v.is_finite() {
            return Err(Error::InvalidParameter {
                name: p.name.into(),
                reason: "must be finite".into(),
            });
        }
        out.insert(p.name.to_string(), v);
    }
    Ok(out)
}

fn positive(params: &BTreeMap<String, f64>, name: &str) -> Result<f64> {
    let v = params[name];
    if v <= 0.0 {
        return Err(Error::InvalidParameter {
            name: name.into(),
            reason: format!("must be positive, got {v}"),
        });
    }
    Ok(v)
}

fn psd_stiffness(k: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if SymmetricEigen::new(k.clone()).eigenvalues.min() < 0.0 {
        return Err(Error::InvalidParameter {
            name: "k".into(),
            reason: "potential stiffness must be positive semidefinite".into(),
        });
    }
    Ok(k)
}

/// Builds a built-in scenario. Missing parameters take their documented
/// defaults; see [`SCENARIOS`].
pub fn scenario(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<(PotentialModel, ObservationModel)> {
    let p = resolve_params(name, params)?;
    let eps = positive(&p, "epsilon")?;
    let r = positive(&p, "r")?;
    match name {
        "linear-1d" => {
            let k = psd_stiffness(DMatrix::from_element(1, 1, p["k"]))?;
            Ok((
                PotentialModel::quadratic(k, eps)?,
                ObservationModel::linear(DMatrix::from_element(1, 1, p["h"]), DMatrix::from_element(1, 1, r))?,
            ))
        }
        "linear-2d" => {
            let k = psd_stiffness(DMatrix::from_row_slice(
                2,
                2,
                &[p["k11"], p["k12"], p["k12"], p["k22"]],
            ))?;
            Ok((
                PotentialModel::quadratic(k, eps)?,
                ObservationModel::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * r)?,
            ))
        }
        "double-well-1d" => Ok((double_well(eps)?, ObservationModel::linear(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, r))?)),
        "bearings-2d" => {
            let k = psd_stiffness(DMatrix::identity(2, 2) * p["k"])?[(0, 0)];
            let center = DVector::from_vec(vec![p["cx"], p["cy"]]);
            let (c1, c2) = (center.clone(), center);
            let potential = PotentialModel::new(
                2,
                Arc::new(move |x| 0.5 * k * (x - &c1).norm_squared()),
                Arc::new(move |x| (x - &c2) * k),
                Arc::new(move |_| DMatrix::identity(2, 2) * k),
                eps,
            )?;
            Ok((potential, bearing_observation(r)?))
        }
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// `V(x) = x^4/4 - x^2/2`, stationary points at -1, 0, 1.
pub fn double_well(epsilon: f64) -> Result<PotentialModel> {
    PotentialModel::new(
        1,
        Arc::new(|x| {
            let v = x[0];
            0.25 * v.powi(4) - 0.5 * v * v
        }),
        Arc::new(|x| {
            let v = x[0];
            DVector::from_element(1, v * v * v - v)
        }),
        Arc::new(|x| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] - 1.0)),
        epsilon,
    )
}

/// `h(x) = atan2(x2, x1)` with scalar noise variance `r`.
pub fn bearing_observation(r: f64) -> Result<ObservationModel> {
    fn guard(x: &DVector<f64>) -> Result<f64> {
        let rho2 = x[0] * x[0] + x[1] * x[1];
        if rho2.sqrt() < BEARING_GUARD {
            return Err(Error::ObservationSingularity(format!(
                "({}, {}): bearing undefined near the origin",
                x[0], x[1]
            )));
        }
        Ok(rho2)
    }
    ObservationModel::new(
        2,
        1,
        Arc::new(|x| {
            guard(x)?;
            Ok(DVector::from_element(1, x[1].atan2(x[0])))
        }),
        Arc::new(|x| {
            let rho2 = guard(x)?;
            Ok(DMatrix::from_row_slice(1, 2, &[-x[1] / rho2, x[0] / rho2]))
        }),
        DMatrix::from_element(1, 1, r),
    )
}
