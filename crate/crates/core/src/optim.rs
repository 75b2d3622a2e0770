//! Small deterministic first-order minimizer used by the exact comparators.

use crate::error::{Error, Result};
use crate::reward::norm;

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Barzilai-Borwein gradient descent with a nonmonotone backtracking
/// safeguard. Stops when `||grad|| <= tol`.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, initial_step: f64, tol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 8;
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut recent = vec![fx];
    let mut step = initial_step;
    for it in 0..max_iter {
        let gn = norm(&g);
        if gn <= tol {
            return Ok(Minimum {
                x,
                value: fx,
                grad_norm: gn,
                iterations: it,
            });
        }
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-13 * fx.abs().max(1.0);
        let mut trial_step = step;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - trial_step * gi).collect();
            let (fc, gc) = f(&cand)?;
            if fc.is_finite() && fc <= reference - 1e-4 * trial_step * gn * gn + slack {
                break (cand, fc, gc);
            }
            trial_step *= 0.5;
            if trial_step < 1e-30 {
                return Err(Error::numerical("optim", "line search failed to make progress"));
            }
        };
        let sy: f64 = x_new
            .iter()
            .zip(&x)
            .zip(g_new.iter().zip(&g))
            .map(|((xn, xo), (gn_, go))| (xn - xo) * (gn_ - go))
            .sum();
        let ss: f64 = x_new.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { trial_step * 2.0 };
        x = x_new;
        fx = f_new;
        g = g_new;
        recent.push(fx);
        if recent.len() > MEMORY {
            recent.remove(0);
        }
    }
    let gn = norm(&g);
    if gn <= tol {
        return Ok(Minimum {
            x,
            value: fx,
            grad_norm: gn,
            iterations: max_iter,
        });
    }
    Err(Error::numerical(
        "optim",
        format!("descent stopped after {max_iter} iterations with gradient norm {gn:e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ill_conditioned_quadratic() {
        let d = [1.0, 10.0, 100.0];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&d).map(|(xi, di)| 0.5 * di * (xi - 1.0).powi(2)).sum();
            let g = x.iter().zip(&d).map(|(xi, di)| di * (xi - 1.0)).collect();
            Ok((v, g))
        };
        let m = minimize(f, vec![0.0; 3], 1e-3, 1e-10, 10_000).unwrap();
        for xi in &m.x {
            assert!((xi - 1.0).abs() < 1e-9);
        }
    }
}
