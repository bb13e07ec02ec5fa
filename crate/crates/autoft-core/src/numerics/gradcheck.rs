//! Central-difference gradient checker used as the test oracle for every
//! hand-derived backward pass in this crate.

use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares `analytic_grad` against central differences of `f` at `point`.
///
/// Per coordinate i the finite difference is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` and the relative error is
/// `|fd - g| / max(|fd|, |g|, 1e-8)`. Returns the maximum relative error
/// over all coordinates, or an error if `f` evaluates to a non-finite value.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic_grad: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic_grad.len(),
        "gradient length must match point length"
    );
    let mut x = point.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated to a non-finite value near coordinate {i}"
            )));
        }
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic_grad[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
