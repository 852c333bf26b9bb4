//! Experiment execution and artifact writing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cvkf::models::scenario;
use cvkf::simulation::{ensemble_mean_standard_error, ensemble_moments, metrics, particle_oracle_step, simulate_truth};
use cvkf::{run_filter, BeliefTrajectory, FilterModels, ParticleEnsemble, TruthTrace};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, OutputFormat};
use crate::CliError;

pub const TRUTH_FILE: &str = "truth.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";

pub const COVARIANCE_NORMALIZATION: &str =
    "oracle covariance is the weighted sample covariance scaled by 1 / (1 - sum w_i^2), unbiased for normalized weights w_i";

/// Per-step particle oracle summary.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSeries {
    pub means: Vec<DVector<f64>>,
    pub standard_errors: Vec<DVector<f64>>,
    pub resamples: usize,
    pub forced_resamples: usize,
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub name: String,
    pub trajectory: BeliefTrajectory,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub truth: TruthTrace,
    pub filters: Vec<FilterResult>,
    pub oracle: Option<OracleSeries>,
    /// Contents of `metrics.json`.
    pub metrics: Value,
    pub files: Vec<PathBuf>,
    pub wall_time: f64,
}

fn stage(stage: &str) -> impl FnOnce(cvkf::Error) -> CliError + '_ {
    move |source| CliError::Model {
        stage: stage.to_string(),
        source,
    }
}

pub fn belief_file(name: &str) -> String {
    format!("belief_{name}.csv")
}

/// Runs the truth simulation, every configured filter and the optional
/// particle oracle, then writes the artifacts. `cfg` must be resolved.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let (pm, om) = scenario(&cfg.scenario.name, &cfg.scenario.params).map_err(stage("scenario"))?;
    let q0 = cfg.initial_belief().map_err(stage("initial belief"))?;
    let method = cfg.method();
    let fp = cfg.fixed_point_config();

    let truth = simulate_truth(&pm, &om, &cfg.initial_truth(), cfg.horizon, cfg.dt, cfg.seed).map_err(stage("truth"))?;
    let truth_time = start.elapsed().as_secs_f64();

    let models = FilterModels {
        potential: &pm,
        observation: &om,
    };
    let mut filters = Vec::with_capacity(cfg.filters.len());
    let mut filter_times = serde_json::Map::new();
    for spec in &cfg.filters {
        let t0 = Instant::now();
        let name = spec.name().to_string();
        let trajectory = run_filter(spec.kind(), models, &q0, &truth.records, method, &fp)
            .map_err(|source| CliError::Model {
                stage: format!("filter {name}"),
                source,
            })?;
        filter_times.insert(name.clone(), json!(t0.elapsed().as_secs_f64()));
        filters.push(FilterResult { name, trajectory });
    }

    let t0 = Instant::now();
    let oracle = match &cfg.particle {
        Some(p) => {
            let seed = p.seed.unwrap_or(cfg.seed.wrapping_add(1));
            let mut ens = ParticleEnsemble::sample(&q0, p.n, seed).map_err(stage("particle oracle"))?;
            let mut series = OracleSeries {
                means: Vec::with_capacity(truth.records.len() + 1),
                standard_errors: Vec::with_capacity(truth.records.len() + 1),
                resamples: 0,
                forced_resamples: 0,
            };
            let mut record = |ens: &ParticleEnsemble| -> cvkf::Result<()> {
                series.means.push(ensemble_moments(ens)?.mean().clone());
                series.standard_errors.push(ensemble_mean_standard_error(ens)?);
                Ok(())
            };
            record(&ens).map_err(stage("particle oracle"))?;
            for rec in &truth.records {
                ens = particle_oracle_step(&ens, &pm, &om, rec).map_err(stage("particle oracle"))?;
                record(&ens).map_err(stage("particle oracle"))?;
            }
            series.resamples = ens.resamples();
            series.forced_resamples = ens.forced_resamples();
            Some(series)
        }
        None => None,
    };
    let oracle_time = t0.elapsed().as_secs_f64();

    let metrics = metrics_json(cfg, &truth, &filters, oracle.as_ref())?;

    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut files = Vec::new();
    if cfg.writes(OutputFormat::Csv) {
        files.push(write(&dir, TRUTH_FILE, &truth_csv(&truth))?);
        for f in &filters {
            files.push(write(&dir, &belief_file(&f.name), &belief_csv(&f.trajectory))?);
        }
    }
    let wall_time = start.elapsed().as_secs_f64();
    if cfg.writes(OutputFormat::Json) {
        let body = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        files.push(write(&dir, METRICS_FILE, &(body + "\n"))?);
        let timing = json!({
            "wall_time_s": wall_time,
            "truth_s": truth_time,
            "filters_s": filter_times,
            "oracle_s": oracle_time,
        });
        let body = serde_json::to_string_pretty(&timing).expect("timing serializes");
        files.push(write(&dir, TIMING_FILE, &(body + "\n"))?);
    }
    Ok(RunReport {
        truth,
        filters,
        oracle,
        metrics,
        files,
        wall_time,
    })
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn num(out: &mut String, x: f64) {
    write!(out, ",{x:.16e}").expect("write to string");
}

/// Columns `t, x_1..x_d, dz_1..dz_m`; `dz` on row `k` is the increment over
/// `[t_k, t_k + dt]`, so the final row leaves it empty.
pub fn truth_csv(truth: &TruthTrace) -> String {
    let d = truth.states.first().map_or(0, |x| x.len());
    let m = truth.records.first().map_or(0, |r| r.dz.len());
    let mut out = String::from("t");
    (1..=d).for_each(|i| write!(out, ",x_{i}").unwrap());
    (1..=m).for_each(|j| write!(out, ",dz_{j}").unwrap());
    out.push('\n');
    for (k, (t, x)) in truth.times.iter().zip(&truth.states).enumerate() {
        write!(out, "{t:.16e}").unwrap();
        x.iter().for_each(|v| num(&mut out, *v));
        match truth.records.get(k) {
            Some(r) => r.dz.iter().for_each(|v| num(&mut out, *v)),
            None => (0..m).for_each(|_| out.push(',')),
        }
        out.push('\n');
    }
    out
}

/// Columns `t, mu_1..mu_d`, then the upper triangle of `P` row by row.
pub fn belief_csv(traj: &BeliefTrajectory) -> String {
    let d = traj.beliefs.first().map_or(0, |q| q.dim());
    let mut out = String::from("t");
    (1..=d).for_each(|i| write!(out, ",mu_{i}").unwrap());
    for i in 1..=d {
        (i..=d).for_each(|j| write!(out, ",P_{i}_{j}").unwrap());
    }
    out.push('\n');
    for (t, q) in traj.times.iter().zip(&traj.beliefs) {
        write!(out, "{t:.16e}").unwrap();
        q.mean().iter().for_each(|v| num(&mut out, *v));
        let p = q.cov();
        for i in 0..d {
            (i..d).for_each(|j| num(&mut out, p[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn metrics_json(
    cfg: &ExperimentConfig,
    truth: &TruthTrace,
    filters: &[FilterResult],
    oracle: Option<&OracleSeries>,
) -> Result<Value, CliError> {
    let mut per_filter = serde_json::Map::new();
    for f in filters {
        let m = metrics(&f.trajectory, truth).map_err(|source| CliError::Model {
            stage: format!("metrics {}", f.name),
            source,
        })?;
        let mut entry = json!({
            "rmse": m.rmse,
            "nees_mean": m.nees_mean,
            "degenerate_steps": f.trajectory.degenerate_steps(),
            "singular_covariance_steps": m.singular_steps.len(),
        });
        if let Some(o) = oracle {
            let gap: Vec<f64> = f
                .trajectory
                .beliefs
                .iter()
                .zip(&o.means)
                .map(|(q, m)| (q.mean() - m).norm())
                .collect();
            entry["oracle_mean_gap"] = json!(gap);
        }
        per_filter.insert(f.name.clone(), entry);
    }
    let mut out = json!({
        "steps": truth.records.len(),
        "filters": per_filter,
        "config": serde_json::to_value(cfg).expect("config serializes"),
    });
    if let Some(o) = oracle {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>();
        out["oracle"] = json!({
            "particles": cfg.particle.as_ref().map(|p| p.n),
            "resamples": o.resamples,
            "forced_resamples": o.forced_resamples,
            "covariance_normalization": COVARIANCE_NORMALIZATION,
            "mean": rows(&o.means),
            "mean_standard_error": rows(&o.standard_errors),
        });
    }
    Ok(out)
}
