//! Reward functions, the estimated reward `r̂` and its gradients.

mod estimate;
mod gumbel;

pub use estimate::{
    coordinate_difference_gradient, estimated_reward, exact_estimated_reward,
    relaxed_estimated_reward, taylor_gradient, RewardGradient, EXPECTATION_GUARD,
};
pub use gumbel::{gumbel_max_with_noise, gumbel_softmax, gumbel_softmax_with_noise, GumbelConfig};

use crate::error::{Error, Result};
use crate::types::{TokenState, Vocab};

/// Finite-difference step used by the default [`RewardFn::gradient`].
pub const FD_STEP: f64 = 1e-5;

/// A reward on sequences, extended to relaxed inputs.
///
/// `rows[l]` is a full-vocabulary row for position `l`; hard states are
/// one-hot rows.
pub trait RewardFn: Send + Sync {
    fn value(&self, rows: &[Vec<f64>]) -> f64;

    /// `∂r/∂rows[l][j]`. Central differences unless overridden.
    fn gradient(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut work = rows.to_vec();
        let mut grad = vec![Vec::new(); rows.len()];
        for l in 0..rows.len() {
            grad[l] = (0..rows[l].len())
                .map(|j| {
                    let orig = work[l][j];
                    work[l][j] = orig + FD_STEP;
                    let up = self.value(&work);
                    work[l][j] = orig - FD_STEP;
                    let down = self.value(&work);
                    work[l][j] = orig;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect();
        }
        grad
    }

    fn value_tokens(&self, state: &TokenState, vocab: &Vocab) -> f64 {
        let rows: Vec<Vec<f64>> = state
            .iter()
            .map(|&t| {
                let mut r = vec![0.0; vocab.size_total()];
                r[t] = 1.0;
                r
            })
            .collect();
        self.value(&rows)
    }

    /// Whether `value` is affine in the rows, so its expectation under a
    /// product distribution is its value at the mean rows.
    fn is_linear(&self) -> bool {
        false
    }
}

/// `r(z) = c + Σ_l ⟨w_l, z_l⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReward {
    coeffs: Vec<Vec<f64>>,
    constant: f64,
}

impl LinearReward {
    pub fn new(coeffs: Vec<Vec<f64>>, constant: f64) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Config("linear reward needs at least one position".into()));
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) || !constant.is_finite() {
            return Err(Error::Config("linear reward coefficients must be finite".into()));
        }
        Ok(Self { coeffs, constant })
    }

    pub fn constant_reward(value: f64, length: usize, vocab_size: usize) -> Result<Self> {
        Self::new(vec![vec![0.0; vocab_size]; length], value)
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }
}

impl RewardFn for LinearReward {
    fn value(&self, rows: &[Vec<f64>]) -> f64 {
        debug_assert_eq!(rows.len(), self.coeffs.len());
        self.constant
            + self
                .coeffs
                .iter()
                .zip(rows)
                .map(|(w, z)| w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
    }

    fn gradient(&self, _rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.coeffs.clone()
    }

    fn value_tokens(&self, state: &TokenState, _vocab: &Vocab) -> f64 {
        self.constant + state.iter().zip(&self.coeffs).map(|(&t, w)| w[t]).sum::<f64>()
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Reward given by an arbitrary function of the rows.
pub struct FnReward<F> {
    f: F,
}

impl<F> FnReward<F>
where
    F: Fn(&[Vec<f64>]) -> f64 + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> RewardFn for FnReward<F>
where
    F: Fn(&[Vec<f64>]) -> f64 + Send + Sync,
{
    fn value(&self, rows: &[Vec<f64>]) -> f64 {
        (self.f)(rows)
    }
}

/// Grid coordinate rescaled to `[-6, 6]`.
pub fn grid_coordinate(i: usize, grid: usize) -> f64 {
    12.0 * (i as f64 / (grid - 1) as f64 - 0.5)
}

/// Separable quadratic reward on a 2D grid:
/// `r(x, y) = -w_x (î_x - o_x)² - w_y (î_y - o_y)²`, linear in the
/// one-hot rows. The mask column has coefficient zero.
pub fn gmm_reward(vocab: &Vocab, axis_weights: (f64, f64), offsets: (f64, f64)) -> Result<LinearReward> {
    let n = vocab.data_size();
    if n < 2 {
        return Err(Error::Config(format!("grid reward needs >= 2 categories, got {n}")));
    }
    let axis = |w: f64, o: f64| -> Vec<f64> {
        let mut row = vec![0.0; vocab.size_total()];
        for i in 0..n {
            let c = grid_coordinate(i, n) - o;
            row[vocab.token_of(i)] = -w * c * c;
        }
        row
    };
    LinearReward::new(
        vec![axis(axis_weights.0, offsets.0), axis(axis_weights.1, offsets.1)],
        0.0,
    )
}

/// The two grid rewards used in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridRewardPreset {
    /// Pulls `y` to the centre line, weakly `x`.
    Top,
    /// Pulls `x` to the centre line and `y` weakly toward `+1`.
    Bottom,
}

impl GridRewardPreset {
    pub fn params(&self) -> ((f64, f64), (f64, f64)) {
        match self {
            Self::Top => ((0.01, 1.0), (0.0, 0.0)),
            Self::Bottom => ((1.0, 0.1), (0.0, 1.0)),
        }
    }

    pub fn build(&self, vocab: &Vocab) -> Result<LinearReward> {
        let (w, o) = self.params();
        gmm_reward(vocab, w, o)
    }
}
