//! Discrete diffusion kernels and the tabular denoiser.

mod kernel;
mod tabular;

pub use kernel::{
    forward_marginal, masked_posterior, remdm_posterior, remdm_sigma_max, udlm_posterior,
};
pub use tabular::{DenoiserOutput, TabularModel, RELAXED_GUARD, TABLE_GUARD};

use crate::error::{Error, Result};
use crate::types::{SimplexVector, TokenState, Vocab};

/// Default cap on the ReMDM remasking probability.
pub const DEFAULT_ETA_CAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ModelFamily {
    #[default]
    Masked,
    /// Masked diffusion with remasking `σ_t = min(eta_cap, σ_t^max)`.
    Remdm { eta_cap: f64 },
    /// Uniform-noise diffusion, no mask token.
    Udlm,
}

impl ModelFamily {
    pub fn uses_mask(&self) -> bool {
        !matches!(self, Self::Udlm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Masked => "masked",
            Self::Remdm { .. } => "remdm",
            Self::Udlm => "udlm",
        }
    }

    /// Vocabulary this family uses for `data_size` clean categories.
    pub fn vocab(&self, data_size: usize) -> Result<Vocab> {
        if self.uses_mask() {
            Vocab::masked(data_size)
        } else {
            Vocab::unmasked(data_size)
        }
    }

    /// Remasking probability for the step `t -> s`; zero unless ReMDM.
    pub fn remask_sigma(&self, alpha_s: f64, alpha_t: f64) -> f64 {
        match *self {
            Self::Remdm { eta_cap } => eta_cap.min(remdm_sigma_max(alpha_s, alpha_t)),
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Remdm { eta_cap } = *self {
            if !(0.0..=1.0).contains(&eta_cap) {
                return Err(Error::Config(format!("eta_cap {eta_cap} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Check that the model's vocabulary matches this family.
    pub fn check_model(&self, model: &TabularModel) -> Result<()> {
        self.validate()?;
        if self.uses_mask() != model.vocab().mask_index().is_some() {
            return Err(Error::Config(format!(
                "{} family needs a vocabulary {} a mask token",
                self.name(),
                if self.uses_mask() { "with" } else { "without" }
            )));
        }
        Ok(())
    }

    /// Initial state at `t = 1`: all-mask, or `None` when the prior is
    /// uniform over categories and must be sampled.
    pub fn initial_state(&self, vocab: &Vocab, length: usize) -> Option<TokenState> {
        if self.uses_mask() {
            TokenState::all_masked(vocab, length).ok()
        } else {
            None
        }
    }
}

/// Per-token posterior of `family` at clean-data row `x`.
pub fn family_posterior(
    family: ModelFamily,
    vocab: &Vocab,
    z_t: usize,
    x: &[f64],
    alpha_s: f64,
    alpha_t: f64,
) -> Result<SimplexVector> {
    match family {
        ModelFamily::Masked => masked_posterior(vocab, z_t, x, alpha_s, alpha_t),
        ModelFamily::Remdm { .. } => {
            let sigma = family.remask_sigma(alpha_s, alpha_t);
            remdm_posterior(vocab, z_t, x, alpha_s, alpha_t, sigma)
        }
        ModelFamily::Udlm => udlm_posterior(z_t, x, alpha_s, alpha_t),
    }
}

/// Factorized reverse kernel `p_θ(z_s^l | z_t)`: the family posterior
/// evaluated at each row of the Bayes denoiser.
pub fn reverse_kernel(
    family: ModelFamily,
    model: &TabularModel,
    z_t: &TokenState,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Vec<SimplexVector>> {
    family.check_model(model)?;
    let den = model.bayes_denoiser(z_t, alpha_t)?;
    kernel_from_denoiser(family, model.vocab(), z_t, &den, alpha_s, alpha_t)
}

/// Reverse kernel from a precomputed denoiser output.
pub fn kernel_from_denoiser(
    family: ModelFamily,
    vocab: &Vocab,
    z_t: &TokenState,
    den: &DenoiserOutput,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Vec<SimplexVector>> {
    z_t.iter()
        .zip(den.rows())
        .map(|(&tok, row)| family_posterior(family, vocab, tok, row, alpha_s, alpha_t))
        .collect()
}
