mod common;

use common::{loglog_slope, spd};
use cvkf::gaussian::{
    bures_sq, bures_wasserstein_distance_sq, fisher_matrix, kl_divergence, kl_quadratic_residual,
    param_len, vech_pairs,
};
use cvkf::{GaussianBelief, GaussianParamVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn belief_strategy(d: usize) -> impl Strategy<Value = GaussianBelief> {
    (
        prop::collection::vec(-3.0..3.0f64, d),
        prop::collection::vec(-1.0..1.0f64, d * d),
        0.05..1.0f64,
    )
        .prop_map(move |(m, a, shift)| {
            GaussianBelief::new(DVector::from_vec(m), spd(d, &a, shift)).unwrap()
        })
}

fn any_belief() -> impl Strategy<Value = GaussianBelief> {
    prop_oneof![belief_strategy(1), belief_strategy(2), belief_strategy(5)]
}

fn belief_pair() -> impl Strategy<Value = (GaussianBelief, GaussianBelief)> {
    (1usize..=4).prop_flat_map(|d| (belief_strategy(d), belief_strategy(d)))
}

/// Random orthogonal matrix from the QR factors of a dense matrix.
fn orthogonal(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, &entries[..d * d]) + DMatrix::identity(d, d) * 3.0;
    a.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn divergences_vanish_on_identical_beliefs(q in any_belief()) {
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() <= 1e-12);
        prop_assert!(bures_wasserstein_distance_sq(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_is_nonnegative((q, r) in belief_pair()) {
        prop_assert!(kl_divergence(&q, &r).unwrap() >= 0.0);
    }

    #[test]
    fn bures_is_symmetric((q, r) in belief_pair()) {
        let a = bures_wasserstein_distance_sq(&q, &r).unwrap();
        let b = bures_wasserstein_distance_sq(&r, &q).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn bures_on_commuting_covariances(
        d in 1usize..=4,
        rot in prop::collection::vec(-1.0..1.0f64, 16),
        lam in prop::collection::vec(0.01..5.0f64, 4),
        nu in prop::collection::vec(0.01..5.0f64, 4),
    ) {
        let u = orthogonal(d, &rot);
        let build = |ev: &[f64]| {
            let p = &u * DMatrix::from_diagonal(&DVector::from_column_slice(&ev[..d])) * u.transpose();
            (&p + p.transpose()) * 0.5
        };
        let got = bures_sq(&build(&lam), &build(&nu)).unwrap();
        let expected: f64 = lam[..d].iter().zip(&nu[..d]).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
        prop_assert!((got - expected).abs() <= 1e-9, "{} vs {}", got, expected);
    }

    #[test]
    fn parameter_vector_round_trip(q in any_belief()) {
        let theta = GaussianParamVector::from_belief(&q);
        prop_assert_eq!(theta.as_vector().len(), param_len(q.dim()));
        let back = theta.to_belief().unwrap();
        prop_assert!(back.max_abs_diff(&q) <= 1e-15 * (1.0 + common::max_abs(q.cov())));
    }

    #[test]
    fn fisher_is_symmetric_and_positive_definite(q in any_belief()) {
        let f = fisher_matrix(&q).unwrap();
        prop_assert_eq!(&f, &f.transpose());
        prop_assert!(f.cholesky().is_some());
    }
}

/// Score of `log N(x; mu, P)` in (mean, vech(cov)) coordinates.
fn score(q: &GaussianBelief, s: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let d = q.dim();
    let w = s * (x - q.mean());
    // d log p / dP = 0.5 (S r r^T S - S); off-diagonal vech entries move both P_ij and P_ji
    let grad_p = (&w * w.transpose() - s) * 0.5;
    let mut out = DVector::zeros(param_len(d));
    out.rows_mut(0, d).copy_from(&w);
    for (k, (i, j)) in vech_pairs(d).into_iter().enumerate() {
        out[d + k] = if i == j { grad_p[(i, i)] } else { 2.0 * grad_p[(i, j)] };
    }
    out
}

#[test]
fn fisher_matches_monte_carlo_gram_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let samples = 1_000_000;
    for case in 0..10 {
        let d = 1 + case % 3;
        let entries: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let q = GaussianBelief::new(mean, spd(d, &entries, 0.3)).unwrap();
        let s = q.precision().unwrap();
        let l = q.cov().clone().cholesky().unwrap().l();
        let n = param_len(d);
        let mut gram = DMatrix::zeros(n, n);
        let mut z = DVector::zeros(d);
        for _ in 0..samples {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let x = q.mean() + &l * &z;
            let g = score(&q, &s, &x);
            gram.ger(1.0, &g, &g, 1.0);
        }
        gram /= samples as f64;
        let f = fisher_matrix(&q).unwrap();
        let rel = (&gram - &f).norm() / f.norm();
        assert!(rel < 0.02, "case {case} (d = {d}): relative gap {rel}");
    }
}

#[test]
fn kl_quadratic_residual_decays_super_quadratically() {
    let q = GaussianBelief::new(
        DVector::from_vec(vec![0.3, -0.2]),
        DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
    )
    .unwrap();
    let direction = DVector::from_vec(vec![0.7, -0.4, 0.5, 0.2, -0.6]);
    let scales = [1e-1, 1e-2, 1e-3];
    let residuals: Vec<f64> = scales
        .iter()
        .map(|&t| {
            let delta = GaussianParamVector::from_vector(2, &direction * t).unwrap();
            kl_quadratic_residual(&q, &delta).unwrap().abs()
        })
        .collect();
    let slope = loglog_slope(&scales, &residuals);
    assert!(slope >= 2.5, "slope {slope}, residuals {residuals:?}");

    // scalar variance perturbation
    let s = GaussianBelief::scalar(0.0, 1.0).unwrap();
    let residuals: Vec<f64> = scales
        .iter()
        .map(|&t| {
            let delta = GaussianParamVector::from_vector(1, DVector::from_vec(vec![0.0, t])).unwrap();
            kl_quadratic_residual(&s, &delta).unwrap().abs()
        })
        .collect();
    assert!(loglog_slope(&scales, &residuals) >= 2.5);

    // the KL divergence is exactly quadratic in the mean
    for &t in &scales {
        let delta = GaussianParamVector::from_vector(1, DVector::from_vec(vec![t, 0.0])).unwrap();
        assert!(kl_quadratic_residual(&s, &delta).unwrap().abs() / (t * t) < 1e-9);
    }
}
