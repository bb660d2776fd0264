//! Log-space helpers.

use crate::error::{Error, Result};

/// Floor applied before taking the log of a kernel mass.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(max(p, PROB_FLOOR))`.
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Max-shifted log-sum-exp. Returns `-inf` when every input is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalize log-values so they exponentiate to a probability vector.
///
/// Returns the normalized log-values and the log normalizer.
pub fn log_normalize(log_values: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("log-values contain NaN or +inf".into()));
    }
    let log_z = log_sum_exp(log_values);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "all log-values are -inf; nothing to normalize".into(),
        ));
    }
    Ok((log_values.iter().map(|v| v - log_z).collect(), log_z))
}

/// Normalized weights from unnormalized log-weights.
pub fn normalized_weights(log_values: &[f64]) -> Result<Vec<f64>> {
    let (normed, _) = log_normalize(log_values)?;
    Ok(normed.into_iter().map(f64::exp).collect())
}
