mod common;

use std::collections::BTreeMap;

use common::loglog_slope;
use cvkf::models::{scenario, SCENARIOS};
use cvkf::propagation::{jko_objective, jko_step_explicit, jko_step_implicit};
use cvkf::{ExpectationMethod, FixedPointConfig, GaussianBelief, PotentialModel};
use nalgebra::{DMatrix, DVector};

const UT: ExpectationMethod = ExpectationMethod::Unscented { kappa: None };

fn potential(name: &str) -> PotentialModel {
    scenario(name, &BTreeMap::new()).unwrap().0
}

fn explicit_implicit_gap(model: &PotentialModel, q: &GaussianBelief, dt: f64) -> f64 {
    let e = jko_step_explicit(q, model, dt, UT).unwrap();
    let i = jko_step_implicit(q, model, dt, UT, &FixedPointConfig::default()).unwrap();
    e.belief.max_abs_diff(&i.belief)
}

#[test]
fn explicit_and_implicit_steps_agree_to_second_order() {
    let dts = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    for (name, q) in [
        ("linear-1d", GaussianBelief::scalar(1.0, 1.0).unwrap()),
        ("double-well-1d", GaussianBelief::scalar(0.8, 0.3).unwrap()),
        ("double-well-1d", GaussianBelief::scalar(-0.2, 0.6).unwrap()),
    ] {
        let model = potential(name);
        let gaps: Vec<f64> = dts.iter().map(|&dt| explicit_implicit_gap(&model, &q, dt)).collect();
        let slope = loglog_slope(&dts, &gaps);
        assert!(slope >= 1.8, "{name}: slope {slope}, gaps {gaps:?}");
    }
}

#[test]
fn linear_covariance_reaches_lyapunov_solution() {
    let model = potential("linear-1d");
    let mut q = GaussianBelief::scalar(1.0, 1.0).unwrap();
    for _ in 0..10_000 {
        let out = jko_step_explicit(&q, &model, 1e-3, ExpectationMethod::ExactLinear).unwrap();
        assert!(!out.degenerate);
        q = out.belief;
    }
    assert!((q.cov()[(0, 0)] - 0.5).abs() <= 1e-4);
}

#[test]
fn propagation_never_floors_on_builtin_scenarios() {
    for info in SCENARIOS {
        let model = potential(info.name);
        let d = model.dim();
        for dt in [1e-2, 1e-3] {
            for implicit in [false, true] {
                let mut q = GaussianBelief::new(DVector::from_element(d, 1.5), DMatrix::identity(d, d) * 0.05).unwrap();
                for _ in 0..(2.0 / dt) as usize {
                    let out = if implicit {
                        jko_step_implicit(&q, &model, dt, UT, &FixedPointConfig::default()).unwrap()
                    } else {
                        jko_step_explicit(&q, &model, dt, UT).unwrap()
                    };
                    assert!(!out.degenerate, "{} dt {dt}", info.name);
                    q = out.belief;
                }
            }
        }
    }
}

#[test]
fn implicit_step_is_a_local_minimizer_of_the_proximal_objective() {
    // The implicit step matches the proximal minimizer up to O(dt^2) in the
    // covariance, so the leftover gradient is O(dt eps^2 / P); narrow beliefs
    // need a smaller step before the 1e-2 dt probes see a minimum.
    for (name, prev, dt) in [
        ("linear-1d", GaussianBelief::scalar(1.0, 1.0).unwrap(), 1e-3),
        ("double-well-1d", GaussianBelief::scalar(0.8, 0.3).unwrap(), 1e-3),
        ("double-well-1d", GaussianBelief::scalar(-1.1, 0.05).unwrap(), 1e-4),
    ] {
        let delta = 1e-2 * dt;
        let model = potential(name);
        let q = jko_step_implicit(&prev, &model, dt, UT, &FixedPointConfig::default()).unwrap().belief;
        let base = jko_objective(&q, &prev, &model, dt, UT).unwrap();
        let (m, p) = (q.mean()[0], q.cov()[(0, 0)]);
        for (dm, dp) in [(delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)] {
            let probe = GaussianBelief::scalar(m + dm, p + dp).unwrap();
            let value = jko_objective(&probe, &prev, &model, dt, UT).unwrap();
            assert!(value > base, "{name}: probe ({dm}, {dp}) gives {value} <= {base}");
        }
    }
}
