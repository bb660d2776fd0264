//! Domain types shared across the crate.
//!
//! Everything here is an immutable value type. Probability vectors are
//! plain `f64` slices underneath so the hot loops in the kernels and the
//! denoiser never pay for validation; validation happens at construction.

use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

/// Tolerance for "sums to one".
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Category set of a discrete diffusion model.
///
/// Data categories are all indices other than the mask index, in increasing
/// order. `data_index` / `token_of` translate between token space and the
/// data-category space used by [`crate::diffusion::TabularModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size_total: usize,
    mask_index: Option<usize>,
}

impl Vocab {
    pub fn new(size_total: usize, mask_index: Option<usize>) -> Result<Self> {
        if size_total < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 categories, got {size_total}"
            )));
        }
        if let Some(m) = mask_index {
            if m >= size_total {
                return Err(Error::Config(format!(
                    "mask index {m} outside vocabulary of size {size_total}"
                )));
            }
            if size_total < 3 {
                return Err(Error::Config(
                    "a masked vocabulary needs at least 2 data categories".into(),
                ));
            }
        }
        Ok(Self {
            size_total,
            mask_index,
        })
    }

    /// `data_size` data categories followed by a trailing mask token.
    pub fn masked(data_size: usize) -> Result<Self> {
        Self::new(data_size + 1, Some(data_size))
    }

    /// `data_size` categories and no mask (uniform-noise models).
    pub fn unmasked(data_size: usize) -> Result<Self> {
        Self::new(data_size, None)
    }

    pub fn size_total(&self) -> usize {
        self.size_total
    }

    pub fn mask_index(&self) -> Option<usize> {
        self.mask_index
    }

    pub fn data_size(&self) -> usize {
        self.size_total - usize::from(self.mask_index.is_some())
    }

    pub fn is_mask(&self, token: usize) -> bool {
        self.mask_index == Some(token)
    }

    /// Data-category index of a token, `None` for the mask.
    #[inline]
    pub fn data_index(&self, token: usize) -> Option<usize> {
        match self.mask_index {
            Some(m) if token == m => None,
            Some(m) if token > m => Some(token - 1),
            _ => Some(token),
        }
    }

    /// Token carrying data category `d`.
    #[inline]
    pub fn token_of(&self, d: usize) -> usize {
        match self.mask_index {
            Some(m) if d >= m => d + 1,
            _ => d,
        }
    }
}

/// A length-L sequence of category indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenState {
    tokens: Vec<usize>,
}

impl TokenState {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Domain("token state must have length >= 1".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size_total()) {
            return Err(Error::Domain(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.size_total()
            )));
        }
        Ok(Self { tokens })
    }

    pub(crate) fn from_vec_unchecked(tokens: Vec<usize>) -> Self {
        debug_assert!(!tokens.is_empty());
        Self { tokens }
    }

    /// Every position set to the mask token.
    pub fn all_masked(vocab: &Vocab, length: usize) -> Result<Self> {
        let m = vocab
            .mask_index()
            .ok_or_else(|| Error::Config("vocabulary has no mask token".into()))?;
        Self::new(vec![m; length], vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Copy with position `l` replaced by `token`.
    pub fn with_token(&self, l: usize, token: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[l] = token;
        Self { tokens }
    }

    pub fn count_masked(&self, vocab: &Vocab) -> usize {
        self.tokens.iter().filter(|&&t| vocab.is_mask(t)).count()
    }
}

impl Deref for TokenState {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.tokens
    }
}

impl fmt::Display for TokenState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Domain(format!("invalid probability entry {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Skips validation; callers guarantee the simplex invariant analytically.
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(
            (probs.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "not a probability vector: {probs:?}"
        );
        Self { probs }
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    /// Normalize a nonnegative weight vector.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Numeric(format!(
                "cannot normalize weights with total {total}"
            )));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the unit entry if this is a hard state.
    pub fn hard_index(&self) -> Option<usize> {
        let mut found = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 1.0 {
                found = Some(i);
            } else if p != 0.0 {
                return None;
            }
        }
        found
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.probs.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

impl Deref for SimplexVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.probs
    }
}

/// One simplex row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedState {
    rows: Vec<SimplexVector>,
}

impl RelaxedState {
    pub fn new(rows: Vec<SimplexVector>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Domain("relaxed state needs at least one row".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Domain("relaxed state rows differ in width".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_tokens(state: &TokenState, vocab: &Vocab) -> Self {
        Self {
            rows: state
                .iter()
                .map(|&t| SimplexVector::one_hot(vocab.size_total(), t))
                .collect(),
        }
    }

    pub fn rows(&self) -> &[SimplexVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Raw row vectors, the form reward functions and the relaxed
    /// denoiser consume.
    pub fn to_raw(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.probs.clone()).collect()
    }

    /// Back to tokens when every row is one-hot.
    pub fn to_tokens(&self) -> Option<TokenState> {
        self.rows
            .iter()
            .map(|r| r.hard_index())
            .collect::<Option<Vec<_>>>()
            .map(TokenState::from_vec_unchecked)
    }
}

/// N weighted token states.
///
/// `log_weights` are kept normalized (log-sum-exp = 0) between steps;
/// `substream_ids` name each slot's RNG substream so that propagation is
/// independent of evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub states: Vec<TokenState>,
    pub log_weights: Vec<f64>,
    pub substream_ids: Vec<u64>,
}

impl ParticleSet {
    /// Uniformly weighted set; substream ids are the slot indices.
    pub fn uniform(states: Vec<TokenState>) -> Self {
        let n = states.len();
        let lw = -(n as f64).ln();
        Self {
            log_weights: vec![lw; n],
            substream_ids: (0..n as u64).collect(),
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Linear-space normalized weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let (normed, _) = crate::numeric::log_normalize(&self.log_weights)?;
        Ok(normed.into_iter().map(f64::exp).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_invariants() {
        let v = Vocab::masked(4).unwrap();
        assert_eq!(v.size_total(), 5);
        assert_eq!(v.data_size(), 4);
        assert!(v.is_mask(4));
        assert!(Vocab::new(1, None).is_err());
        assert!(Vocab::new(3, Some(3)).is_err());
        assert_eq!(Vocab::unmasked(64).unwrap().data_size(), 64);
    }

    #[test]
    fn data_index_roundtrip_with_interior_mask() {
        let v = Vocab::new(5, Some(2)).unwrap();
        assert_eq!(v.data_index(2), None);
        assert_eq!(v.data_index(3), Some(2));
        for d in 0..v.data_size() {
            assert_eq!(v.data_index(v.token_of(d)), Some(d));
        }
    }

    #[test]
    fn token_state_validation() {
        let v = Vocab::masked(3).unwrap();
        assert!(TokenState::new(vec![], &v).is_err());
        assert!(TokenState::new(vec![0, 4], &v).is_err());
        let s = TokenState::all_masked(&v, 2).unwrap();
        assert_eq!(s.tokens(), &[3, 3]);
        assert_eq!(s.count_masked(&v), 2);
        assert!(TokenState::all_masked(&Vocab::unmasked(3).unwrap(), 2).is_err());
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexVector::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexVector::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexVector::new(vec![1.5, -0.5]).is_err());
        assert_eq!(SimplexVector::one_hot(3, 1).hard_index(), Some(1));
        assert_eq!(SimplexVector::uniform(2).hard_index(), None);
    }

    #[test]
    fn relaxed_hard_roundtrip() {
        let v = Vocab::masked(3).unwrap();
        let s = TokenState::new(vec![0, 3, 2], &v).unwrap();
        let r = RelaxedState::from_tokens(&s, &v);
        assert_eq!(r.to_tokens(), Some(s));
    }
}
