//! Forward marginals and per-token backward posteriors.
//!
//! All posteriors take the clean-data argument `x` as a full-vocabulary
//! probability vector, so they accept both one-hot data and the relaxed
//! output of a denoiser. Times enter through the noise levels
//! `alpha_s >= alpha_t` of the step `t -> s`.

use crate::error::{Error, Result};
use crate::types::{SimplexVector, Vocab};

const MASK_TOL: f64 = 1e-12;

fn check_step(alpha_s: f64, alpha_t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha_s) || !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::Domain(format!(
            "noise levels must lie in [0, 1], got alpha_s={alpha_s}, alpha_t={alpha_t}"
        )));
    }
    if alpha_s < alpha_t {
        return Err(Error::Domain(format!(
            "reverse step needs alpha_s >= alpha_t, got {alpha_s} < {alpha_t}"
        )));
    }
    Ok(())
}

fn require_mask(vocab: &Vocab) -> Result<usize> {
    vocab
        .mask_index()
        .ok_or_else(|| Error::Config("masked posterior needs a mask token".into()))
}

/// `q(z_t | x) = Cat(α_t x + (1 - α_t) π)`.
pub fn forward_marginal(x: &SimplexVector, alpha_t: f64, prior: &SimplexVector) -> Result<SimplexVector> {
    if x.len() != prior.len() {
        return Err(Error::Domain("data and prior differ in width".into()));
    }
    if x.hard_index().is_none() {
        return Err(Error::Domain("forward marginal expects a one-hot input".into()));
    }
    if !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::Domain(format!("alpha_t {alpha_t} outside [0, 1]")));
    }
    let probs = x
        .iter()
        .zip(prior.iter())
        .map(|(xi, pi)| alpha_t * xi + (1.0 - alpha_t) * pi)
        .collect();
    Ok(SimplexVector::from_vec_unchecked(probs))
}

/// Masked-diffusion posterior `q(z_s | z_t, x)`.
///
/// Unmasked tokens are carried over; a masked token stays masked with
/// probability `(1 - α_s)/(1 - α_t)` and otherwise unmasks to `x`.
pub fn masked_posterior(
    vocab: &Vocab,
    z_t: usize,
    x: &[f64],
    alpha_s: f64,
    alpha_t: f64,
) -> Result<SimplexVector> {
    let m = require_mask(vocab)?;
    check_step(alpha_s, alpha_t)?;
    if x.len() != vocab.size_total() {
        return Err(Error::Domain("x has wrong width".into()));
    }
    if z_t != m {
        return Ok(SimplexVector::one_hot(vocab.size_total(), z_t));
    }
    if x[m] > MASK_TOL {
        return Err(Error::Domain(format!(
            "denoiser output puts mass {} on the mask token",
            x[m]
        )));
    }
    let denom = 1.0 - alpha_t;
    if denom <= 0.0 {
        return Err(Error::Numeric(
            "masked posterior at alpha_t = 1 with a masked token".into(),
        ));
    }
    let keep = (1.0 - alpha_s) / denom;
    let unmask = (alpha_s - alpha_t) / denom;
    let mut probs: Vec<f64> = x.iter().map(|xi| unmask * xi).collect();
    probs[m] = keep;
    Ok(SimplexVector::from_vec_unchecked(probs))
}

/// Largest valid remasking probability `min{1, (1 - α_s)/α_t}`.
pub fn remdm_sigma_max(alpha_s: f64, alpha_t: f64) -> f64 {
    if alpha_t <= 0.0 {
        1.0
    } else {
        ((1.0 - alpha_s) / alpha_t).min(1.0)
    }
}

/// Remasking posterior `q_σ(z_s | z_t, x)`.
pub fn remdm_posterior(
    vocab: &Vocab,
    z_t: usize,
    x: &[f64],
    alpha_s: f64,
    alpha_t: f64,
    sigma: f64,
) -> Result<SimplexVector> {
    let m = require_mask(vocab)?;
    check_step(alpha_s, alpha_t)?;
    if x.len() != vocab.size_total() {
        return Err(Error::Domain("x has wrong width".into()));
    }
    let sigma_max = remdm_sigma_max(alpha_s, alpha_t);
    if !(0.0..=sigma_max + 1e-15).contains(&sigma) {
        return Err(Error::Domain(format!(
            "remasking probability {sigma} outside [0, {sigma_max}]"
        )));
    }
    if x[m] > MASK_TOL {
        return Err(Error::Domain(format!(
            "denoiser output puts mass {} on the mask token",
            x[m]
        )));
    }
    let (cx, cm) = if z_t != m {
        (1.0 - sigma, sigma)
    } else {
        let denom = 1.0 - alpha_t;
        if denom <= 0.0 {
            return Err(Error::Numeric(
                "remasking posterior at alpha_t = 1 with a masked token".into(),
            ));
        }
        (
            (alpha_s - (1.0 - sigma) * alpha_t) / denom,
            // clamp the tiny negative rounding at sigma = sigma_max
            ((1.0 - alpha_s - sigma * alpha_t) / denom).max(0.0),
        )
    };
    let mut probs: Vec<f64> = x.iter().map(|xi| cx * xi).collect();
    probs[m] = cm;
    Ok(SimplexVector::from_vec_unchecked(probs))
}

/// Uniform-noise posterior `q(z_s | z_t, x)` with prior `1/V`.
pub fn udlm_posterior(z_t: usize, x: &[f64], alpha_s: f64, alpha_t: f64) -> Result<SimplexVector> {
    check_step(alpha_s, alpha_t)?;
    let v = x.len();
    if z_t >= v {
        return Err(Error::Domain(format!("token {z_t} outside vocabulary {v}")));
    }
    if alpha_s <= 0.0 {
        return Err(Error::Numeric("uniform posterior needs alpha_s > 0".into()));
    }
    let vf = v as f64;
    let denom = vf * alpha_t * x[z_t] + 1.0 - alpha_t;
    if denom <= 0.0 {
        return Err(Error::Numeric(format!(
            "uniform posterior denominator {denom} is not positive"
        )));
    }
    let c_z = alpha_t / alpha_s - alpha_t;
    let c_x = alpha_s - alpha_t;
    let c_1 = (alpha_s - alpha_t) * (1.0 - alpha_s) / (vf * alpha_s);
    let probs = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let zi = if i == z_t { 1.0 } else { 0.0 };
            ((vf * alpha_t * zi * xi + c_z * zi + c_x * xi + c_1) / denom).max(0.0)
        })
        .collect();
    Ok(SimplexVector::from_vec_unchecked(probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn forward_marginal_endpoints() {
        let v = Vocab::masked(3).unwrap();
        let x = SimplexVector::one_hot(4, 2);
        let prior = SimplexVector::one_hot(4, 3);
        assert_eq!(forward_marginal(&x, 1.0, &prior).unwrap(), x);
        assert_eq!(forward_marginal(&x, 0.0, &prior).unwrap(), prior);
        let mid = forward_marginal(&x, 0.6, &prior).unwrap();
        assert!(close(&mid, &[0.0, 0.0, 0.6, 0.4], 1e-15));
        let _ = v;
    }

    #[test]
    fn forward_marginal_rejects_relaxed() {
        let x = SimplexVector::uniform(3);
        assert!(forward_marginal(&x, 0.5, &SimplexVector::uniform(3)).is_err());
    }

    #[test]
    fn masked_carry_over() {
        let v = Vocab::masked(8).unwrap();
        let x = SimplexVector::one_hot(9, 0);
        let out = masked_posterior(&v, 7, &x, 0.5, 0.25).unwrap();
        assert_eq!(out.hard_index(), Some(7));
    }

    #[test]
    fn masked_unmask_step() {
        let v = Vocab::masked(3).unwrap();
        let x = SimplexVector::one_hot(4, 1);
        let out = masked_posterior(&v, 3, &x, 0.5, 0.25).unwrap();
        assert!(close(&out, &[0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn masked_final_step_returns_x() {
        let v = Vocab::masked(3).unwrap();
        let x = [0.2, 0.3, 0.5, 0.0];
        let out = masked_posterior(&v, 3, &x, 1.0, 0.4).unwrap();
        assert!(close(&out, &x, 0.0));
    }

    #[test]
    fn masked_errors() {
        let v = Vocab::masked(3).unwrap();
        let x = [0.5, 0.5, 0.0, 0.0];
        assert!(matches!(
            masked_posterior(&v, 3, &x, 1.0, 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(masked_posterior(&v, 3, &[0.5, 0.0, 0.0, 0.5], 0.5, 0.2).is_err());
        assert!(masked_posterior(&v, 3, &x, 0.2, 0.5).is_err());
        assert!(masked_posterior(&Vocab::unmasked(4).unwrap(), 0, &x, 0.5, 0.2).is_err());
    }

    #[test]
    fn remdm_reductions() {
        let v = Vocab::masked(4).unwrap();
        let x = SimplexVector::one_hot(5, 2);
        let out = remdm_posterior(&v, 2, &x, 0.6, 0.5, 0.0).unwrap();
        assert_eq!(out.hard_index(), Some(2));

        let xr = [0.1, 0.2, 0.3, 0.4, 0.0];
        let a = remdm_posterior(&v, 4, &xr, 0.6, 0.5, 0.0).unwrap();
        let b = masked_posterior(&v, 4, &xr, 0.6, 0.5).unwrap();
        assert!(close(&a, &b, 1e-15));
    }

    #[test]
    fn remdm_at_sigma_max() {
        let v = Vocab::masked(4).unwrap();
        let (a_s, a_t) = (0.8, 0.7);
        let smax = remdm_sigma_max(a_s, a_t);
        assert!((smax - 0.2 / 0.7).abs() < 1e-15);
        let x = SimplexVector::one_hot(5, 1);
        let out = remdm_posterior(&v, 1, &x, a_s, a_t, smax).unwrap();
        assert!(close(&out, &[0.0, 1.0 - smax, 0.0, 0.0, smax], 1e-15));
        // masked branch at sigma_max has zero mask mass left
        let out = remdm_posterior(&v, 4, &x, a_s, a_t, smax).unwrap();
        assert!(out[4].abs() < 1e-12);
        assert!(remdm_posterior(&v, 1, &x, a_s, a_t, smax + 1e-6).is_err());
        assert!(remdm_posterior(&v, 1, &x, a_s, a_t, -0.1).is_err());
    }

    #[test]
    fn udlm_identity_at_clean_end() {
        let x = SimplexVector::one_hot(6, 3);
        let out = udlm_posterior(3, &x, 1.0, 0.3).unwrap();
        assert!(close(&out, &x, 1e-12));
    }

    #[test]
    fn udlm_noise_limit() {
        let x = [0.1, 0.6, 0.3];
        let a_s = 0.4;
        let out = udlm_posterior(0, &x, a_s, 0.0).unwrap();
        let expect: Vec<f64> = x.iter().map(|xi| a_s * xi + (1.0 - a_s) / 3.0).collect();
        assert!(close(&out, &expect, 1e-12));
    }

    #[test]
    fn udlm_normalized() {
        let x = [0.05, 0.15, 0.5, 0.3];
        for z in 0..4 {
            let out = udlm_posterior(z, &x, 0.7, 0.35).unwrap();
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
