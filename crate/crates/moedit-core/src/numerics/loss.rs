use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{softmax, Matrix, NumericsError};
use crate::math;

/// Mean next-token cross entropy and its logit gradient.
///
/// One logits row per predicted position. Returns
/// `loss = mean_t( -log softmax(logits[t])[target[t]] )` and
/// `grad[t] = (softmax(logits[t]) - onehot(target[t])) / n_positions`.
pub fn cross_entropy_grad(
    logits: &Matrix,
    target_ids: &[usize],
) -> Result<(f64, Matrix), NumericsError> {
    if logits.rows() != target_ids.len() {
        return Err(NumericsError::Dimension(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            target_ids.len()
        )));
    }
    if target_ids.is_empty() {
        return Err(NumericsError::Argument(String::from(
            "cross entropy over zero positions",
        )));
    }
    let vocab = logits.cols();
    for &t in target_ids {
        if t >= vocab {
            return Err(NumericsError::Argument(format!(
                "target id {t} out of vocab {vocab}"
            )));
        }
    }
    let n = target_ids.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), vocab);
    let mut loss = 0.0;
    for (row, &target) in target_ids.iter().enumerate() {
        let probs: Vec<f64> = softmax(logits.row(row))?;
        loss -= math::ln(probs[target].max(f64::MIN_POSITIVE));
        let g = grad.row_mut(row);
        for (gv, &p) in g.iter_mut().zip(&probs) {
            *gv = p / n;
        }
        g[target] -= 1.0 / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite("cross_entropy_grad"));
    }
    Ok((loss, grad))
}
