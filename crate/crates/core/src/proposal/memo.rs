use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

use crate::diffusion::{ModelFamily, TabularModel};
use crate::error::Result;
use crate::reward::{estimated_reward, GumbelConfig, RewardFn};
use crate::rng::RngStream;
use crate::types::TokenState;

use super::StepContext;

pub(crate) const STREAM_RHAT: u64 = 3;
const DENSE_LIMIT: usize = 1 << 22;

/// Integer key of a token sequence (exact base-`V` index when it fits).
pub fn state_key(state: &TokenState, vocab_size: usize) -> u64 {
    state
        .iter()
        .fold(0u64, |acc, &t| acc.wrapping_mul(vocab_size as u64).wrapping_add(t as u64))
}

enum Storage {
    Dense(Vec<OnceLock<f64>>),
    Sparse(RwLock<HashMap<TokenState, f64>>),
}

/// `r̂` at one time level, computed at most once per state.
///
/// Monte Carlo estimates draw from a stream keyed by the level and the
/// state, so a cached value never depends on which caller filled it.
pub struct RewardMemo<'a> {
    model: &'a TabularModel,
    family: ModelFamily,
    reward: &'a dyn RewardFn,
    gumbel: GumbelConfig,
    stream: RngStream,
    alpha: f64,
    storage: Storage,
}

impl<'a> RewardMemo<'a> {
    /// Memo for grid level `level` (time `level / T`) at noise `alpha`.
    pub fn new(ctx: &StepContext<'a>, level: usize, alpha: f64) -> Self {
        Self::with_parts(ctx.model, ctx.family, ctx.reward, ctx.gumbel, ctx.stream, level, alpha)
    }

    pub fn with_parts(
        model: &'a TabularModel,
        family: ModelFamily,
        reward: &'a dyn RewardFn,
        gumbel: GumbelConfig,
        root: &RngStream,
        level: usize,
        alpha: f64,
    ) -> Self {
        let v = model.vocab().size_total();
        let dense = (0..model.length())
            .try_fold(1usize, |acc, _| acc.checked_mul(v).filter(|&n| n <= DENSE_LIMIT));
        let storage = match dense {
            Some(n) => Storage::Dense((0..n).map(|_| OnceLock::new()).collect()),
            None => Storage::Sparse(RwLock::new(HashMap::new())),
        };
        Self {
            model,
            family,
            reward,
            gumbel,
            stream: root.descend(&[STREAM_RHAT, level as u64]),
            alpha,
            storage,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn compute(&self, state: &TokenState, key: u64) -> Result<f64> {
        estimated_reward(
            self.model,
            self.family,
            self.reward,
            state,
            self.alpha,
            &self.gumbel,
            &self.stream.child(key),
        )
    }

    pub fn get(&self, state: &TokenState) -> Result<f64> {
        let key = state_key(state, self.model.vocab().size_total());
        match &self.storage {
            Storage::Dense(cells) => {
                let cell = &cells[key as usize];
                if let Some(v) = cell.get() {
                    return Ok(*v);
                }
                let v = self.compute(state, key)?;
                Ok(*cell.get_or_init(|| v))
            }
            Storage::Sparse(map) => {
                if let Some(v) = map.read().expect("memo lock").get(state) {
                    return Ok(*v);
                }
                let v = self.compute(state, key)?;
                Ok(*map
                    .write()
                    .expect("memo lock")
                    .entry(state.clone())
                    .or_insert(v))
            }
        }
    }
}
