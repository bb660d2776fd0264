use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::gumbel;
use crate::types::SimplexVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Monte Carlo samples per estimate.
    pub samples: usize,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            samples: 100,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("gumbel tau must be > 0, got {}", self.tau)));
        }
        if self.samples == 0 {
            return Err(Error::Config("gumbel sample count must be >= 1".into()));
        }
        Ok(())
    }
}

/// `softmax((log p + g) / τ)` for given noise `g`. Zero-probability
/// entries get a `-inf` logit and come out exactly zero.
pub fn gumbel_softmax_with_noise(p: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(p.len(), noise.len());
    let logits: Vec<f64> = p
        .iter()
        .zip(noise)
        .map(|(&pi, &g)| if pi > 0.0 { (pi.ln() + g) / tau } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Index of `argmax(log p + g)` over the support of `p`.
pub fn gumbel_max_with_noise(p: &[f64], noise: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&pi, &g)) in p.iter().zip(noise).enumerate() {
        if pi > 0.0 {
            let v = pi.ln() + g;
            if best == usize::MAX || v > best_v {
                best = i;
                best_v = v;
            }
        }
    }
    best
}

pub fn gumbel_softmax<R: Rng + ?Sized>(p: &SimplexVector, tau: f64, rng: &mut R) -> SimplexVector {
    let noise: Vec<f64> = (0..p.len()).map(|_| gumbel(rng)).collect();
    SimplexVector::from_vec_unchecked(gumbel_softmax_with_noise(p, tau, &noise))
}
