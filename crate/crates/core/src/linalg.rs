use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `a x = b` for a square `a` by LU with partial pivoting.
pub(crate) fn solve(a: DMatrix<f64>, b: &DMatrix<f64>, module: &'static str) -> Result<DMatrix<f64>> {
    let lu = a.lu();
    lu.solve(b)
        .ok_or_else(|| Error::numerical(module, "singular linear system"))
}

pub(crate) fn solve_vec(a: DMatrix<f64>, b: &DVector<f64>, module: &'static str) -> Result<DVector<f64>> {
    let lu = a.lu();
    lu.solve(b)
        .ok_or_else(|| Error::numerical(module, "singular linear system"))
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
