use nalgebra::DVector;

use crate::error::{RblError, Result};

/// `sqrt(mean over trials of ‖x̂ₑ − x‖²)`.
pub fn compute_rmse(estimates: &[DVector<f64>], truth: &DVector<f64>) -> Result<f64> {
    if estimates.is_empty() {
        return Err(RblError::EmptyInput("no estimates"));
    }
    let mut sum = 0.0;
    for e in estimates {
        if e.len() != truth.len() {
            return Err(RblError::DimensionMismatch {
                context: "estimate length",
                expected: truth.len(),
                actual: e.len(),
            });
        }
        sum += (e - truth).norm_squared();
    }
    Ok(rmse_from_sum(sum, estimates.len()))
}

/// RMSE from an accumulated squared-error sum; NaN when `count` is zero.
pub fn rmse_from_sum(sum_sq: f64, count: usize) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        (sum_sq / count as f64).sqrt()
    }
}
