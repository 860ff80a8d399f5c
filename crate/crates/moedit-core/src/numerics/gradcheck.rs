use alloc::vec::Vec;

use super::NumericsError;
use crate::math;

/// Central-finite-difference check of an analytic gradient.
///
/// Perturbs each coordinate of `p` by `±h`, evaluates `f`, and returns
/// `max_i |central_diff_i - analytic_i| / (|analytic_i| + 1e-8)`.
/// Every hand-written backward pass in this workspace is validated
/// against this oracle.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    p: &[f64],
    analytic_grad: &[f64],
    h: f64,
) -> Result<f64, NumericsError> {
    if p.len() != analytic_grad.len() {
        return Err(NumericsError::Dimension(alloc::format!(
            "{} params vs {} gradient entries",
            p.len(),
            analytic_grad.len()
        )));
    }
    if !(h > 0.0) {
        return Err(NumericsError::Argument(alloc::format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut scratch: Vec<f64> = p.to_vec();
    let mut max_err = 0.0;
    for i in 0..p.len() {
        scratch[i] = p[i] + h;
        let up = f(&scratch);
        scratch[i] = p[i] - h;
        let down = f(&scratch);
        scratch[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite("finite_diff_check evaluation"));
        }
        let central = (up - down) / (2.0 * h);
        let err = math::abs(central - analytic_grad[i]) / (math::abs(analytic_grad[i]) + 1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
