//! The estimated reward `r̂(z_t) = E_{x ~ x_θ(z_t)}[r(x)]` and its
//! gradient with respect to the (relaxed) noisy state.

use crate::diffusion::{ModelFamily, TabularModel};
use crate::error::{Error, Result};
use crate::rng::{gumbel, RngStream};
use crate::types::TokenState;

use super::gumbel::{gumbel_max_with_noise, gumbel_softmax_with_noise};
use super::{GumbelConfig, RewardFn};

/// Largest product support enumerated by [`exact_estimated_reward`].
pub const EXPECTATION_GUARD: usize = 1 << 20;

/// `∂r̂/∂z^l_j` at the evaluation point, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGradient {
    pub matrix: Vec<Vec<f64>>,
}

impl RewardGradient {
    pub fn zeros(length: usize, vocab_size: usize) -> Self {
        Self {
            matrix: vec![vec![0.0; vocab_size]; length],
        }
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.matrix[l]
    }

    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.matrix[l][j]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix
            .iter()
            .flatten()
            .zip(other.matrix.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check(model: &TabularModel, family: ModelFamily, z_t: &TokenState) -> Result<()> {
    family.check_model(model)?;
    if z_t.len() != model.length() {
        return Err(Error::Domain(format!(
            "state of length {} for a model of length {}",
            z_t.len(),
            model.length()
        )));
    }
    Ok(())
}

/// Gumbel noise for one Monte Carlo sample: one row per position.
fn noise_rows<R: rand::Rng + ?Sized>(length: usize, width: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..length)
        .map(|_| (0..width).map(|_| gumbel(rng)).collect())
        .collect()
}

/// `r̂(z_t)`. Linear rewards are evaluated exactly at the denoiser rows;
/// otherwise the mean of `r` over `cfg.samples` hard samples, drawn
/// row-wise by Gumbel-max from the stream `rng`.
pub fn estimated_reward(
    model: &TabularModel,
    family: ModelFamily,
    r: &dyn RewardFn,
    z_t: &TokenState,
    alpha_t: f64,
    cfg: &GumbelConfig,
    rng: &RngStream,
) -> Result<f64> {
    check(model, family, z_t)?;
    cfg.validate()?;
    let den = model.bayes_denoiser(z_t, alpha_t)?.to_raw();
    if r.is_linear() {
        return Ok(r.value(&den));
    }
    let vocab = model.vocab();
    let mut gen = rng.rng();
    let mut total = 0.0;
    for _ in 0..cfg.samples {
        let g = noise_rows(den.len(), vocab.size_total(), &mut gen);
        let toks = den
            .iter()
            .zip(&g)
            .map(|(p, gl)| gumbel_max_with_noise(p, gl))
            .collect();
        total += r.value_tokens(&TokenState::from_vec_unchecked(toks), vocab);
    }
    Ok(total / cfg.samples as f64)
}

/// `r̂(z_t)` computed exactly: by linearity, or by enumerating the product
/// of the denoiser rows' supports.
pub fn exact_estimated_reward(
    model: &TabularModel,
    family: ModelFamily,
    r: &dyn RewardFn,
    z_t: &TokenState,
    alpha_t: f64,
) -> Result<f64> {
    check(model, family, z_t)?;
    let den = model.bayes_denoiser(z_t, alpha_t)?.to_raw();
    if r.is_linear() {
        return Ok(r.value(&den));
    }
    let supports: Vec<Vec<(usize, f64)>> = den
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (i, *p))
                .collect()
        })
        .collect();
    let count = supports
        .iter()
        .try_fold(1usize, |acc, s| acc.checked_mul(s.len()).filter(|&n| n <= EXPECTATION_GUARD));
    if count.is_none() {
        return Err(Error::Guard(format!(
            "exact expectation over more than {EXPECTATION_GUARD} joint outcomes"
        )));
    }
    let vocab = model.vocab();
    let mut idx = vec![0usize; supports.len()];
    let mut total = 0.0;
    loop {
        let mut p = 1.0;
        let toks: Vec<usize> = idx
            .iter()
            .zip(&supports)
            .map(|(&k, s)| {
                p *= s[k].1;
                s[k].0
            })
            .collect();
        total += p * r.value_tokens(&TokenState::from_vec_unchecked(toks), vocab);
        let mut l = supports.len();
        loop {
            if l == 0 {
                return Ok(total);
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < supports[l].len() {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// `r` evaluated at the relaxed denoiser output for arbitrary real rows.
/// For linear rewards this is the continuous extension of `r̂` that
/// [`taylor_gradient`] differentiates.
pub fn relaxed_estimated_reward(
    model: &TabularModel,
    r: &dyn RewardFn,
    rows: &[Vec<f64>],
    alpha_t: f64,
) -> Result<f64> {
    Ok(r.value(&model.relaxed_denoiser_raw(rows, alpha_t)?))
}

/// Value and gradient of `r̂` at the hard state `z_t`.
///
/// Linear rewards differentiate the exact value through the relaxed
/// denoiser. Otherwise each Monte Carlo sample uses one set of Gumbel
/// draws for both a hard Gumbel-max sample (value) and a Gumbel-softmax
/// relaxation (gradient), then pulls the gradient back through the
/// denoiser.
pub fn taylor_gradient(
    model: &TabularModel,
    family: ModelFamily,
    r: &dyn RewardFn,
    z_t: &TokenState,
    alpha_t: f64,
    cfg: &GumbelConfig,
    rng: &RngStream,
) -> Result<(f64, RewardGradient)> {
    check(model, family, z_t)?;
    cfg.validate()?;
    let den = model.bayes_denoiser(z_t, alpha_t)?.to_raw();
    let vocab = model.vocab();
    let (value, upstream) = if r.is_linear() {
        (r.value(&den), r.gradient(&den))
    } else {
        let v = vocab.size_total();
        let mut gen = rng.rng();
        let mut total = 0.0;
        let mut upstream = vec![vec![0.0; v]; den.len()];
        for _ in 0..cfg.samples {
            let g = noise_rows(den.len(), v, &mut gen);
            let toks = den
                .iter()
                .zip(&g)
                .map(|(p, gl)| gumbel_max_with_noise(p, gl))
                .collect();
            total += r.value_tokens(&TokenState::from_vec_unchecked(toks), vocab);
            let y: Vec<Vec<f64>> = den
                .iter()
                .zip(&g)
                .map(|(p, gl)| gumbel_softmax_with_noise(p, cfg.tau, gl))
                .collect();
            let gy = r.gradient(&y);
            for l in 0..den.len() {
                let inner: f64 = gy[l].iter().zip(&y[l]).map(|(a, b)| a * b).sum();
                for j in 0..v {
                    let p = den[l][j];
                    // softmax of log p: ∂y_i/∂p_j = y_i (δ_ij - y_j) / (τ p_j)
                    if p > 0.0 {
                        upstream[l][j] += y[l][j] * (gy[l][j] - inner) / (cfg.tau * p);
                    }
                }
            }
        }
        let k = cfg.samples as f64;
        upstream.iter_mut().flatten().for_each(|u| *u /= k);
        (total / k, upstream)
    };
    let matrix = model.denoiser_pullback(z_t, alpha_t, &upstream)?;
    Ok((value, RewardGradient { matrix }))
}

/// One-token differences `r̂(z with z^l = j) - r̂(z)` at masked positions,
/// computed with exact expectations. Zero on the mask column and on
/// unmasked rows.
pub fn coordinate_difference_gradient(
    model: &TabularModel,
    family: ModelFamily,
    r: &dyn RewardFn,
    z_t: &TokenState,
    alpha_t: f64,
) -> Result<RewardGradient> {
    check(model, family, z_t)?;
    if !family.uses_mask() {
        return Err(Error::Config(
            "coordinate differences are defined for masked families".into(),
        ));
    }
    let vocab = model.vocab();
    let base = exact_estimated_reward(model, family, r, z_t, alpha_t)?;
    let mut out = RewardGradient::zeros(z_t.len(), vocab.size_total());
    for l in 0..z_t.len() {
        if !vocab.is_mask(z_t[l]) {
            continue;
        }
        for d in 0..vocab.data_size() {
            let j = vocab.token_of(d);
            let moved = z_t.with_token(l, j);
            out.matrix[l][j] = exact_estimated_reward(model, family, r, &moved, alpha_t)? - base;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{FnReward, LinearReward};
    use crate::types::Vocab;

    fn l1_model() -> TabularModel {
        TabularModel::new(Vocab::masked(2).unwrap(), 1, vec![0.25, 0.75]).unwrap()
    }

    #[test]
    fn linear_exact_value() {
        let m = l1_model();
        let r = LinearReward::new(vec![vec![0.0, 4.0, 0.0]], 0.0).unwrap();
        let z = TokenState::all_masked(m.vocab(), 1).unwrap();
        let v = estimated_reward(&m, ModelFamily::Masked, &r, &z, 0.5, &GumbelConfig::default(), &RngStream::new(0))
            .unwrap();
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mc_value_near_expectation() {
        let m = l1_model();
        let r = FnReward::new(|rows: &[Vec<f64>]| 4.0 * rows[0][1]);
        let z = TokenState::all_masked(m.vocab(), 1).unwrap();
        let cfg = GumbelConfig { tau: 0.5, samples: 100 };
        let v = estimated_reward(&m, ModelFamily::Masked, &r, &z, 0.5, &cfg, &RngStream::new(3)).unwrap();
        // sd of one draw is 4·sqrt(0.75·0.25)
        let sd = 4.0 * (0.75f64 * 0.25).sqrt() / 10.0;
        assert!((v - 3.0).abs() < 3.0 * sd, "{v}");
    }

    #[test]
    fn constant_reward_zero_gradient() {
        let m = l1_model();
        let r = LinearReward::constant_reward(2.5, 1, 3).unwrap();
        let z = TokenState::all_masked(m.vocab(), 1).unwrap();
        let (v, g) =
            taylor_gradient(&m, ModelFamily::Masked, &r, &z, 0.5, &GumbelConfig::default(), &RngStream::new(0)).unwrap();
        assert_eq!(v, 2.5);
        assert!(g.matrix.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn unmasked_state_value_is_reward() {
        let m = TabularModel::new(Vocab::masked(2).unwrap(), 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = FnReward::new(|rows: &[Vec<f64>]| rows[0][1] * rows[1][0] * 7.0);
        let z = TokenState::new(vec![1, 0], m.vocab()).unwrap();
        let v = estimated_reward(&m, ModelFamily::Masked, &r, &z, 0.5, &GumbelConfig::default(), &RngStream::new(0))
            .unwrap();
        assert_eq!(v, 7.0);
    }

    #[test]
    fn coordinate_difference_small() {
        let m = l1_model();
        let r = LinearReward::new(vec![vec![0.0, 1.0, 0.0]], 0.0).unwrap();
        // r̂(mask) = 0.75, so columns are (-0.75, 0.25)
        let z = TokenState::all_masked(m.vocab(), 1).unwrap();
        let g = coordinate_difference_gradient(&m, ModelFamily::Masked, &r, &z, 0.5).unwrap();
        assert!((g.get(0, 0) + 0.75).abs() < 1e-15);
        assert!((g.get(0, 1) - 0.25).abs() < 1e-15);
        assert_eq!(g.get(0, 2), 0.0);
    }

    #[test]
    fn exact_expectation_enumerates() {
        let m = TabularModel::new(Vocab::masked(2).unwrap(), 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = FnReward::new(|rows: &[Vec<f64>]| rows[0][1] * rows[1][1]);
        let z = TokenState::all_masked(m.vocab(), 2).unwrap();
        // product of marginals: P(x0=1)=0.7, P(x1=1)=0.6
        let v = exact_estimated_reward(&m, ModelFamily::Masked, &r, &z, 0.5).unwrap();
        assert!((v - 0.42).abs() < 1e-15);
    }
}
