mod common;

use std::collections::BTreeMap;

use common::{loglog_slope, spd, v};
use cvkf::models::scenario;
use cvkf::update::{
    covariance_form_update, lmmr_objective, lmmr_step_covariance, lmmr_step_precision,
    natural_gradient_step,
};
use cvkf::{ExpectationMethod, FixedPointConfig, GaussianBelief, ObservationModel};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

const UT: ExpectationMethod = ExpectationMethod::Unscented { kappa: None };

fn observation(name: &str) -> ObservationModel {
    scenario(name, &BTreeMap::new()).unwrap().1
}

fn fp() -> FixedPointConfig {
    FixedPointConfig::default()
}

fn linear_2x2() -> (DMatrix<f64>, DMatrix<f64>, ObservationModel) {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    let r = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8]);
    let model = ObservationModel::linear(h.clone(), r.clone()).unwrap();
    (h, r, model)
}

#[test]
fn precision_accumulates_linearly_for_static_linear_observations() {
    let (h, r, model) = linear_2x2();
    let info = h.transpose() * r.clone().try_inverse().unwrap() * &h;
    let q0 = GaussianBelief::new(v(&[0.3, -0.1]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
    let dt = 0.01;
    let steps = 50;
    for method in [ExpectationMethod::ExactLinear, UT] {
        let mut q = q0.clone();
        for k in 0..steps {
            let dz = v(&[0.02 * (k as f64).sin(), -0.01]);
            q = lmmr_step_precision(&q, &model, &dz, dt, method, &fp()).unwrap().belief;
        }
        let expected = q0.precision().unwrap() + &info * (steps as f64 * dt);
        let got = q.precision().unwrap();
        assert!(common::max_abs(&(&got - &expected)) <= 1e-9, "{method}: {got} vs {expected}");
    }
}

#[test]
fn sequential_updates_reproduce_the_batch_posterior() {
    let (h, r, model) = linear_2x2();
    let r_inv = r.clone().try_inverse().unwrap();
    let q0 = GaussianBelief::new(v(&[1.0, 0.5]), DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.7])).unwrap();
    let dt = 0.02;
    let truth = v(&[0.4, -0.6]);
    let increments: Vec<DVector<f64>> = (0..40)
        .map(|k| &h * &truth * dt + v(&[0.03 * (1.3 * k as f64).cos(), 0.02 * (0.7 * k as f64).sin()]))
        .collect();

    // information filter accumulation
    let mut lambda = q0.precision().unwrap();
    let mut eta = &lambda * q0.mean();
    for dz in &increments {
        lambda += h.transpose() * &r_inv * &h * dt;
        eta += h.transpose() * &r_inv * dz;
    }
    let cov = lambda.clone().try_inverse().unwrap();
    let mean = &cov * eta;

    let mut q = q0.clone();
    for dz in &increments {
        q = lmmr_step_precision(&q, &model, dz, dt, ExpectationMethod::ExactLinear, &fp()).unwrap().belief;
    }
    assert!((q.mean() - &mean).amax() <= 1e-8);
    assert!(common::max_abs(&(q.cov() - &cov)) <= 1e-8);
}

fn form_gap(model: &ObservationModel, q: &GaussianBelief, rate: &DVector<f64>, dt: f64) -> f64 {
    let dz = rate * dt;
    let p = lmmr_step_precision(q, model, &dz, dt, UT, &fp()).unwrap().belief;
    let c = lmmr_step_covariance(q, model, &dz, dt, UT, &fp()).unwrap().belief;
    p.max_abs_diff(&c)
}

#[test]
fn precision_and_covariance_forms_agree_to_second_order() {
    let dts = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    for (name, q, rate) in [
        ("linear-1d", GaussianBelief::scalar(0.0, 1.0).unwrap(), 1.0),
        ("linear-1d", GaussianBelief::scalar(0.5, 0.4).unwrap(), -2.0),
        ("double-well-1d", GaussianBelief::scalar(0.9, 0.2).unwrap(), 0.5),
    ] {
        let model = observation(name);
        let rate = v(&[rate]);
        let gaps: Vec<f64> = dts.iter().map(|&dt| form_gap(&model, &q, &rate, dt)).collect();
        let slope = loglog_slope(&dts, &gaps);
        assert!(slope >= 1.8, "{name}: slope {slope}, gaps {gaps:?}");
    }
}

#[test]
fn natural_gradient_gap_shrinks_with_the_step() {
    let dts = [1e-1, 1e-2, 1e-3];
    for (name, q) in [
        ("linear-1d", GaussianBelief::scalar(0.0, 1.0).unwrap()),
        ("double-well-1d", GaussianBelief::scalar(0.7, 0.3).unwrap()),
    ] {
        let model = observation(name);
        let gaps: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let dz = v(&[dt]);
                let a = natural_gradient_step(&q, &model, &dz, dt, UT, &fp()).unwrap().belief;
                let b = lmmr_step_precision(&q, &model, &dz, dt, UT, &fp()).unwrap().belief;
                a.max_abs_diff(&b)
            })
            .collect();
        let slope = loglog_slope(&dts, &gaps);
        assert!(slope >= 1.5, "{name}: slope {slope}, gaps {gaps:?}");
    }
}

#[test]
fn update_lowers_the_proximal_objective_and_is_a_local_minimum() {
    let dt = 0.1;
    for (name, prev, dz) in [
        ("linear-1d", GaussianBelief::scalar(0.0, 1.0).unwrap(), 0.1),
        ("linear-1d", GaussianBelief::scalar(0.4, 0.6).unwrap(), -0.3),
        ("double-well-1d", GaussianBelief::scalar(0.9, 0.2).unwrap(), 0.05),
    ] {
        let model = observation(name);
        let dz = v(&[dz]);
        let q = lmmr_step_precision(&prev, &model, &dz, dt, UT, &fp()).unwrap().belief;
        let at = |c: &GaussianBelief| lmmr_objective(c, &prev, &model, &dz, dt, UT).unwrap();
        let base = at(&q);
        assert!(base < at(&prev));
        let (m, p) = (q.mean()[0], q.cov()[(0, 0)]);
        for (dm, dp) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            let probe = GaussianBelief::scalar(m + dm, p + dp).unwrap();
            assert!(at(&probe) > base, "{name}: probe ({dm}, {dp})");
        }
    }
}

fn belief2() -> impl Strategy<Value = GaussianBelief> {
    (
        prop::collection::vec(-2.0..2.0f64, 2),
        prop::collection::vec(-1.0..1.0f64, 4),
        0.05..1.0f64,
    )
        .prop_map(|(m, a, s)| GaussianBelief::new(DVector::from_vec(m), spd(2, &a, s)).unwrap())
}

fn lambda_max(p: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(p.clone()).eigenvalues.max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn precision_update_never_inflates_uncertainty(
        q in belief2(),
        h in prop::collection::vec(-2.0..2.0f64, 4),
        dz in prop::collection::vec(-0.5..0.5f64, 2),
        dt in 1e-3..0.2f64,
    ) {
        let g = DMatrix::from_row_slice(2, 2, &h) + DMatrix::identity(2, 2) * 2.5;
        prop_assume!(g.determinant().abs() > 1e-3);
        let r = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.4]);
        // substitution contracts when P G^T R^-1 G dt is small
        let info = g.transpose() * r.clone().try_inverse().unwrap() * &g;
        prop_assume!(lambda_max(q.cov()) * lambda_max(&info) * dt < 0.5);
        let model = ObservationModel::linear(g, r).unwrap();
        let out = lmmr_step_precision(&q, &model, &DVector::from_vec(dz), dt, UT, &fp()).unwrap();
        prop_assert!(lambda_max(out.belief.cov()) <= lambda_max(q.cov()) + 1e-12);
    }

    #[test]
    fn scalar_double_well_update_never_inflates_uncertainty(
        m in -2.0..2.0f64, var in 0.01..2.0f64, dz in -0.5..0.5f64, dt in 1e-3..0.2f64,
    ) {
        let q = GaussianBelief::scalar(m, var).unwrap();
        let out = lmmr_step_precision(&q, &observation("double-well-1d"), &v(&[dz]), dt, UT, &fp()).unwrap();
        prop_assert!(out.belief.cov()[(0, 0)] <= var + 1e-12);
    }

    #[test]
    fn covariance_update_matches_direct_formula(
        q in belief2(),
        dc in prop::collection::vec(-1.0..1.0f64, 2),
        dh in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let dc = DVector::from_vec(dc);
        let dh = DMatrix::from_row_slice(2, 2, &dh);
        let (mean, cov) = covariance_form_update(&q, &dc, &dh);
        let p = q.cov();
        for i in 0..2 {
            let expected_mean = q.mean()[i] + p[(i, 0)] * dc[0] + p[(i, 1)] * dc[1];
            prop_assert!((mean[i] - expected_mean).abs() <= 1e-14);
            for j in 0..2 {
                let mut expected = p[(i, j)];
                for k in 0..2 {
                    expected += 0.5 * dh[(i, k)] * p[(k, j)] + 0.5 * p[(i, k)] * dh[(j, k)];
                }
                prop_assert!((cov[(i, j)] - expected).abs() <= 1e-14);
            }
        }
    }
}
