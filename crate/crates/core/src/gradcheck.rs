//! Central finite-difference gradient checks.

use crate::error::{Error, Result};

/// Elementwise relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference `(f(x+eps e_i) − f(x−eps e_i)) / 2eps` for every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite difference probe"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Maximum relative error between `analytic` and the central-difference
/// gradient of `f` at `x`.
pub fn finite_diff_gradcheck(
    f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Shape(format!("finite difference step {eps} outside [1e-7, 1e-4]")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!("{} analytic entries for {} inputs", analytic.len(), x.len())));
    }
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(numeric
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n))
        .fold(0.0, f64::max))
}
