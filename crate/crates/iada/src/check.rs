//! Central finite-difference gradient oracle.
//!
//! Lives in the library (not test code) because the `gradcheck` CLI verb and
//! the acceptance suite both drive it. It never touches the tape's backward
//! path: it only re-evaluates a black-box scalar function.

use crate::tensor::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per element.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |a_i − b_i| / (|a_i| + 1e-8)` with `a` the analytic gradient.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}
