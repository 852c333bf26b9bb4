#![allow(dead_code)]

use cvkf::ObservationRecord;
use nalgebra::{DMatrix, DVector};

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Sums consecutive groups of `factor` records into one coarser record.
pub fn coarsen(records: &[ObservationRecord], factor: usize) -> Vec<ObservationRecord> {
    records
        .chunks(factor)
        .map(|c| {
            let mut dz = DVector::zeros(c[0].dz.len());
            for r in c {
                dz += &r.dz;
            }
            ObservationRecord::new(c[0].t, c[0].dt * factor as f64, dz).unwrap()
        })
        .collect()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// Symmetric positive definite `A A^T + shift I`.
pub fn spd(d: usize, entries: &[f64], shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    &a * a.transpose() + DMatrix::identity(d, d) * shift
}
