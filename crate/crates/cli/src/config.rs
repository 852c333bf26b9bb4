//! Experiment configuration: TOML schema, defaults and validation.
//!
//! A config is parsed in two passes. Deserialization rejects unknown keys and
//! reports the offending line; [`ExperimentConfig::resolve`] then fills every
//! default that depends on the scenario and validates field values.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cvkf::models::{resolve_params, scenario, SCENARIOS};
use cvkf::{ExpectationMethod, FilterKind, FixedPointConfig, GaussianBelief, PropagationKind, UpdateForm};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_OUTPUT_DIR: &str = "output";
/// Default initial covariance is this times the identity.
pub const DEFAULT_INITIAL_VARIANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub formats: Option<Vec<OutputFormat>>,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub expectation: ExpectationSpec,
    #[serde(default)]
    pub fixed_point: FixedPointSpec,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub particle: Option<ParticleSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    /// Truth and belief trajectories.
    Csv,
    /// `metrics.json` and `timing.json`.
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Initial belief of every filter and initial state of the simulated truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: Option<Vec<f64>>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    ExactLinear,
    #[default]
    Unscented,
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationSpec {
    #[serde(default)]
    pub method: MethodName,
    pub kappa: Option<f64>,
    pub order: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSpec {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub damping: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    #[default]
    Cvkf,
    KalmanBucy,
    PropagationOnly,
    UpdateOnly,
}

impl KindName {
    fn label(self) -> &'static str {
        match self {
            KindName::Cvkf => "cvkf",
            KindName::KalmanBucy => "kalman-bucy",
            KindName::PropagationOnly => "propagation-only",
            KindName::UpdateOnly => "update-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationName {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateName {
    Precision,
    Covariance,
    NaturalGradient,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    /// Used for the belief file name; defaults to the kind.
    pub name: Option<String>,
    #[serde(default)]
    pub kind: KindName,
    pub propagation: Option<PropagationName>,
    pub update: Option<UpdateName>,
}

impl FilterSpec {
    pub fn kind(&self) -> FilterKind {
        let prop = match self.propagation {
            Some(PropagationName::Implicit) => PropagationKind::Implicit,
            _ => PropagationKind::Explicit,
        };
        let form = match self.update {
            Some(UpdateName::Covariance) => UpdateForm::Covariance,
            Some(UpdateName::NaturalGradient) => UpdateForm::NaturalGradient,
            _ => UpdateForm::Precision,
        };
        match self.kind {
            KindName::Cvkf => FilterKind::Cvkf { propagation: prop, update: form },
            KindName::KalmanBucy => FilterKind::KalmanBucy,
            KindName::PropagationOnly => FilterKind::PropagationOnly(prop),
            KindName::UpdateOnly => FilterKind::UpdateOnly(form),
        }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.label())
    }
}

/// Bootstrap particle oracle run alongside the filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub n: usize,
    pub seed: Option<u64>,
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn model_error(field: &str, e: cvkf::Error) -> CliError {
    match e {
        cvkf::Error::InvalidParameter { name, reason } => invalid(&format!("{field}.{name}"), reason),
        other => invalid(field, other.to_string()),
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Deserializes a config without resolving defaults.
pub fn parse_unresolved(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })
}

/// Parses, resolves and validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    parse_unresolved(text)?.resolve()
}

impl ExperimentConfig {
    /// Fills every default, echoing it into the config, and validates.
    /// Resolving a resolved config is the identity.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", format!("must be positive and finite, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(invalid("horizon", format!("must be positive and finite, got {}", self.horizon)));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(invalid("horizon", "must be an integer multiple of dt"));
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from(DEFAULT_OUTPUT_DIR));
        }
        let mut formats = self.formats.take().unwrap_or_else(|| vec![OutputFormat::Csv, OutputFormat::Json]);
        formats.sort();
        formats.dedup();
        self.formats = Some(formats);

        let name = self.scenario.name.clone();
        if !SCENARIOS.iter().any(|s| s.name == name) {
            return Err(invalid("scenario.name", format!("unknown scenario `{name}`")));
        }
        self.scenario.params = resolve_params(&name, &self.scenario.params).map_err(|e| model_error("scenario.params", e))?;
        let (pm, om) = scenario(&name, &self.scenario.params).map_err(|e| model_error("scenario.params", e))?;
        let d = pm.dim();

        let mean = match self.initial.mean.take() {
            Some(m) => m,
            None => default_initial_mean(&name, &self.scenario.params, d),
        };
        check_len("initial.mean", &mean, d)?;
        let cov = self
            .initial
            .cov
            .take()
            .unwrap_or_else(|| (0..d).map(|i| (0..d).map(|j| if i == j { DEFAULT_INITIAL_VARIANCE } else { 0.0 }).collect()).collect());
        if cov.len() != d || cov.iter().any(|row| row.len() != d) {
            return Err(invalid("initial.cov", format!("must be a {d}x{d} matrix")));
        }
        let truth = self.initial.truth.take().unwrap_or_else(|| mean.clone());
        check_len("initial.truth", &truth, d)?;
        self.initial = InitialSpec {
            mean: Some(mean),
            cov: Some(cov),
            truth: Some(truth),
        };
        self.initial_belief().map_err(|e| invalid("initial.cov", e.to_string()))?;

        self.resolve_expectation(d)?;
        let linear = pm.quadratic_form().is_some() && om.linear_map().is_some();
        if self.expectation.method == MethodName::ExactLinear && !linear {
            return Err(invalid("expectation.method", format!("exact-linear needs a linear scenario, `{name}` is not")));
        }

        let fp = FixedPointConfig::default();
        self.fixed_point = FixedPointSpec {
            max_iter: Some(self.fixed_point.max_iter.unwrap_or(fp.max_iter)),
            tol: Some(self.fixed_point.tol.unwrap_or(fp.tol)),
            damping: Some(self.fixed_point.damping.unwrap_or(fp.damping)),
        };
        self.fixed_point_config()
            .validate()
            .map_err(|e| model_error("fixed_point", e))?;

        if self.filters.is_empty() {
            self.filters.push(FilterSpec::default());
        }
        for (i, f) in self.filters.iter_mut().enumerate() {
            resolve_filter(i, f, linear)?;
        }
        let mut names: Vec<&str> = self.filters.iter().map(|f| f.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("filters.name", "filter names must be unique"));
        }

        let seed = self.seed;
        if let Some(p) = self.particle.as_mut() {
            if p.n < 2 {
                return Err(invalid("particle.n", "needs at least 2 particles"));
            }
            // Distinct from the truth seed so the oracle never replays the truth noise.
            p.seed.get_or_insert(seed.wrapping_add(1));
        }
        Ok(self)
    }

    fn resolve_expectation(&mut self, d: usize) -> Result<(), CliError> {
        let e = &mut self.expectation;
        let reject = |set: bool, field: &str| {
            if set {
                Err(invalid(&format!("expectation.{field}"), format!("not used by method {:?}", e.method)))
            } else {
                Ok(())
            }
        };
        match e.method {
            MethodName::ExactLinear => {
                reject(e.kappa.is_some(), "kappa")?;
                reject(e.order.is_some(), "order")?;
                reject(e.samples.is_some(), "samples")?;
                reject(e.seed.is_some(), "seed")?;
            }
            MethodName::Unscented => {
                reject(e.order.is_some(), "order")?;
                reject(e.samples.is_some(), "samples")?;
                reject(e.seed.is_some(), "seed")?;
                let kappa = *e.kappa.get_or_insert(3.0 - d as f64);
                if !(kappa.is_finite() && d as f64 + kappa > 0.0) {
                    return Err(invalid("expectation.kappa", "d + kappa must be positive"));
                }
            }
            MethodName::GaussHermite => {
                reject(e.kappa.is_some(), "kappa")?;
                reject(e.samples.is_some(), "samples")?;
                reject(e.seed.is_some(), "seed")?;
                let order = *e.order.get_or_insert(5);
                if order == 0 {
                    return Err(invalid("expectation.order", "must be at least 1"));
                }
                if d > cvkf::expectation::GAUSS_HERMITE_MAX_DIM {
                    return Err(invalid("expectation.method", format!("gauss-hermite supports d <= {}", cvkf::expectation::GAUSS_HERMITE_MAX_DIM)));
                }
            }
            MethodName::MonteCarlo => {
                reject(e.kappa.is_some(), "kappa")?;
                reject(e.order.is_some(), "order")?;
                if *e.samples.get_or_insert(10_000) < 2 {
                    return Err(invalid("expectation.samples", "needs at least 2 samples"));
                }
                e.seed.get_or_insert(self.seed);
            }
        }
        Ok(())
    }

    /// Expectation method of a resolved config.
    pub fn method(&self) -> ExpectationMethod {
        let e = &self.expectation;
        match e.method {
            MethodName::ExactLinear => ExpectationMethod::ExactLinear,
            MethodName::Unscented => ExpectationMethod::Unscented { kappa: e.kappa },
            MethodName::GaussHermite => ExpectationMethod::GaussHermite { order: e.order.unwrap_or(5) },
            MethodName::MonteCarlo => ExpectationMethod::MonteCarlo {
                samples: e.samples.unwrap_or(10_000),
                seed: e.seed.unwrap_or(self.seed),
            },
        }
    }

    pub fn fixed_point_config(&self) -> FixedPointConfig {
        let d = FixedPointConfig::default();
        FixedPointConfig {
            max_iter: self.fixed_point.max_iter.unwrap_or(d.max_iter),
            tol: self.fixed_point.tol.unwrap_or(d.tol),
            damping: self.fixed_point.damping.unwrap_or(d.damping),
        }
    }

    pub fn initial_belief(&self) -> cvkf::Result<GaussianBelief> {
        let mean = self.initial.mean.clone().unwrap_or_default();
        let d = mean.len();
        let cov = self.initial.cov.clone().unwrap_or_default();
        let flat: Vec<f64> = cov.into_iter().flatten().collect();
        GaussianBelief::new(DVector::from_vec(mean), DMatrix::from_row_slice(d, d, &flat))
    }

    pub fn initial_truth(&self) -> DVector<f64> {
        DVector::from_vec(self.initial.truth.clone().unwrap_or_default())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn writes(&self, format: OutputFormat) -> bool {
        self.formats.as_ref().is_none_or(|f| f.contains(&format))
    }

    /// Resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_len(field: &str, v: &[f64], d: usize) -> Result<(), CliError> {
    if v.len() != d {
        return Err(invalid(field, format!("expected {d} entries, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(())
}

/// Zero, except for bearings where the origin is a singular point of the
/// observation map and the potential minimum is used instead.
fn default_initial_mean(name: &str, params: &BTreeMap<String, f64>, d: usize) -> Vec<f64> {
    match name {
        "bearings-2d" => vec![params["cx"], params["cy"]],
        _ => vec![0.0; d],
    }
}

fn resolve_filter(i: usize, f: &mut FilterSpec, linear: bool) -> Result<(), CliError> {
    let field = |s: &str| format!("filters[{i}].{s}");
    let (uses_prop, uses_update) = match f.kind {
        KindName::Cvkf => (true, true),
        KindName::KalmanBucy => (false, false),
        KindName::PropagationOnly => (true, false),
        KindName::UpdateOnly => (false, true),
    };
    if uses_prop {
        f.propagation.get_or_insert(PropagationName::Explicit);
    } else if f.propagation.is_some() {
        return Err(invalid(&field("propagation"), format!("not used by kind {}", f.kind.label())));
    }
    if uses_update {
        f.update.get_or_insert(UpdateName::Precision);
    } else if f.update.is_some() {
        return Err(invalid(&field("update"), format!("not used by kind {}", f.kind.label())));
    }
    if f.kind == KindName::KalmanBucy && !linear {
        return Err(invalid(&field("kind"), "kalman-bucy needs a linear scenario"));
    }
    let name = f.name.get_or_insert_with(|| f.kind.label().to_string());
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(invalid(&field("name"), "use ASCII letters, digits, '-' or '_'"));
    }
    Ok(())
}
