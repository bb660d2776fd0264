//! Exact tabular "pre-trained" model.
//!
//! The data distribution is stored as a dense table over all
//! `data_size^L` clean sequences, and the denoiser is the exact Bayes
//! posterior computed from it. Masked-vocabulary models condition on the
//! unmasked tokens; unmasked-vocabulary (uniform-noise) models weight each
//! clean sequence by the likelihood of the noisy tokens.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::types::{RelaxedState, SimplexVector, TokenState, Vocab};

/// Largest joint table the model will hold.
pub const TABLE_GUARD: usize = 1 << 24;
/// Largest number of relaxed-input configurations the masked relaxed
/// denoiser will enumerate per position.
pub const RELAXED_GUARD: usize = 1 << 20;

/// Per-position denoiser prediction `x_θ(z_t, t)`, in token space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    rows: Vec<SimplexVector>,
}

impl DenoiserOutput {
    pub fn new(rows: Vec<SimplexVector>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[SimplexVector] {
        &self.rows
    }

    pub fn to_raw(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.to_vec()).collect()
    }

    pub fn into_relaxed(self) -> RelaxedState {
        RelaxedState::new(self.rows).expect("denoiser rows share a width")
    }
}

#[derive(Debug)]
pub struct TabularModel {
    vocab: Vocab,
    length: usize,
    table: Vec<f64>,
    strides: Vec<usize>,
    marginals: Vec<Vec<f64>>,
    zero_evidence: AtomicUsize,
}

impl Clone for TabularModel {
    fn clone(&self) -> Self {
        Self {
            vocab: self.vocab,
            length: self.length,
            table: self.table.clone(),
            strides: self.strides.clone(),
            marginals: self.marginals.clone(),
            zero_evidence: AtomicUsize::new(self.zero_evidence.load(Ordering::Relaxed)),
        }
    }
}

fn joint_size(data_size: usize, length: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..length {
        n = n
            .checked_mul(data_size)
            .filter(|&n| n <= TABLE_GUARD)
            .ok_or_else(|| {
                Error::Guard(format!(
                    "{data_size}^{length} joint states exceed the table guard of {TABLE_GUARD}"
                ))
            })?;
    }
    Ok(n)
}

impl TabularModel {
    /// `table[i]` is the probability of the sequence whose data categories
    /// are the base-`data_size` digits of `i`, position 0 most significant.
    pub fn new(vocab: Vocab, length: usize, table: Vec<f64>) -> Result<Self> {
        if length == 0 {
            return Err(Error::Config("sequence length must be >= 1".into()));
        }
        let d = vocab.data_size();
        let n = joint_size(d, length)?;
        if table.len() != n {
            return Err(Error::Input(format!(
                "table has {} entries, expected {d}^{length} = {n}",
                table.len()
            )));
        }
        if let Some(bad) = table.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Input(format!("invalid table entry {bad}")));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("table sums to {total}, expected 1")));
        }
        let mut strides = vec![1usize; length];
        for l in (0..length.saturating_sub(1)).rev() {
            strides[l] = strides[l + 1] * d;
        }
        let mut marginals = vec![vec![0.0; d]; length];
        let mut digits = vec![0usize; length];
        for &p in &table {
            for (l, &x) in digits.iter().enumerate() {
                marginals[l][x] += p;
            }
            for l in (0..length).rev() {
                digits[l] += 1;
                if digits[l] < d {
                    break;
                }
                digits[l] = 0;
            }
        }
        Ok(Self {
            vocab,
            length,
            table,
            strides,
            marginals,
            zero_evidence: AtomicUsize::new(0),
        })
    }

    /// Same data distribution under a different vocabulary (e.g. dropping
    /// the mask token for a uniform-noise model).
    pub fn with_vocab(&self, vocab: Vocab) -> Result<Self> {
        if vocab.data_size() != self.data_size() {
            return Err(Error::Config(format!(
                "vocabulary has {} data categories, model has {}",
                vocab.data_size(),
                self.data_size()
            )));
        }
        let mut m = self.clone();
        m.vocab = vocab;
        Ok(m)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data_size(&self) -> usize {
        self.vocab.data_size()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn num_states(&self) -> usize {
        self.table.len()
    }

    /// Per-position marginals over data categories.
    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    /// How many times a denoiser query conditioned on a zero-probability
    /// event and fell back to the uniform prediction.
    pub fn zero_evidence_count(&self) -> usize {
        self.zero_evidence.load(Ordering::Relaxed)
    }

    pub fn encode(&self, data: &[usize]) -> usize {
        data.iter().zip(&self.strides).map(|(x, s)| x * s).sum()
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let d = self.data_size();
        let mut out = vec![0; self.length];
        for l in (0..self.length).rev() {
            out[l] = index % d;
            index /= d;
        }
        out
    }

    /// Token state for a joint index.
    pub fn state_of(&self, index: usize) -> TokenState {
        TokenState::from_vec_unchecked(
            self.decode(index)
                .into_iter()
                .map(|d| self.vocab.token_of(d))
                .collect(),
        )
    }

    /// Joint index of a fully unmasked token state.
    pub fn index_of(&self, state: &TokenState) -> Option<usize> {
        let mut idx = 0;
        for (l, &t) in state.iter().enumerate() {
            idx += self.vocab.data_index(t)? * self.strides[l];
        }
        Some(idx)
    }

    pub fn prob(&self, data: &[usize]) -> f64 {
        self.table[self.encode(data)]
    }

    /// Conditional marginals of every position given the observed data
    /// categories (`None` = unobserved). `None` when the evidence has
    /// zero probability.
    pub fn conditional(&self, observed: &[Option<usize>]) -> Option<Vec<Vec<f64>>> {
        debug_assert_eq!(observed.len(), self.length);
        let d = self.data_size();
        let free: Vec<usize> = (0..self.length).filter(|&l| observed[l].is_none()).collect();
        if free.len() == self.length {
            return Some(self.marginals.clone());
        }
        let base: usize = observed
            .iter()
            .zip(&self.strides)
            .map(|(o, s)| o.unwrap_or(0) * s)
            .sum();
        let mut rows = vec![vec![0.0; d]; self.length];
        let mut total = 0.0;
        let mut digits = vec![0usize; free.len()];
        let mut idx = base;
        'outer: loop {
            let p = self.table[idx];
            if p > 0.0 {
                total += p;
                for (k, &f) in free.iter().enumerate() {
                    rows[f][digits[k]] += p;
                }
            }
            let mut k = free.len();
            loop {
                if k == 0 {
                    break 'outer;
                }
                k -= 1;
                let stride = self.strides[free[k]];
                digits[k] += 1;
                idx += stride;
                if digits[k] < d {
                    break;
                }
                digits[k] = 0;
                idx -= d * stride;
            }
        }
        if total <= 0.0 {
            return None;
        }
        for (l, row) in rows.iter_mut().enumerate() {
            match observed[l] {
                Some(x) => row[x] = 1.0,
                None => row.iter_mut().for_each(|v| *v /= total),
            }
        }
        Some(rows)
    }

    fn conditional_or_uniform(&self, observed: &[Option<usize>]) -> Vec<Vec<f64>> {
        self.conditional(observed).unwrap_or_else(|| {
            self.zero_evidence.fetch_add(1, Ordering::Relaxed);
            let d = self.data_size();
            observed
                .iter()
                .map(|o| match o {
                    Some(x) => {
                        let mut r = vec![0.0; d];
                        r[*x] = 1.0;
                        r
                    }
                    None => vec![1.0 / d as f64; d],
                })
                .collect()
        })
    }

    fn embed(&self, data_row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab.size_total()];
        for (d, &p) in data_row.iter().enumerate() {
            out[self.vocab.token_of(d)] = p;
        }
        out
    }

    fn observed_of(&self, z: &TokenState) -> Vec<Option<usize>> {
        z.iter().map(|&t| self.vocab.data_index(t)).collect()
    }

    fn check_state(&self, z: &TokenState) -> Result<()> {
        if z.len() != self.length {
            return Err(Error::Domain(format!(
                "state of length {} for a model of length {}",
                z.len(),
                self.length
            )));
        }
        if let Some(&bad) = z.iter().find(|&&t| t >= self.vocab.size_total()) {
            return Err(Error::Domain(format!("token {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Exact Bayes denoiser at a hard state.
    ///
    /// With a mask token the prediction is the conditional of each masked
    /// position given all unmasked ones (independent of `alpha_t`), and
    /// unmasked positions are carried over. Without a mask token the
    /// prediction is the uniform-noise posterior at noise level `alpha_t`.
    pub fn bayes_denoiser(&self, z: &TokenState, alpha_t: f64) -> Result<DenoiserOutput> {
        self.check_state(z)?;
        if self.vocab.mask_index().is_none() {
            return self.udlm_denoiser(&RelaxedState::from_tokens(z, &self.vocab).to_raw(), alpha_t);
        }
        let cond = self.conditional_or_uniform(&self.observed_of(z));
        let rows = z
            .iter()
            .enumerate()
            .map(|(l, &t)| {
                if self.vocab.is_mask(t) {
                    SimplexVector::from_vec_unchecked(self.embed(&cond[l]))
                } else {
                    SimplexVector::one_hot(self.vocab.size_total(), t)
                }
            })
            .collect();
        Ok(DenoiserOutput { rows })
    }

    /// Continuous extension of the denoiser on arbitrary real rows.
    ///
    /// Masked vocabulary: row `l` is `γ_l x̃_l + (1 - m) ⊙ z_l` with
    /// `γ_l = 1 - Σ_{k≠m} z_{l,k}`. The prediction `x̃_l` averages exact
    /// conditionals over the other positions, each observed as category `k`
    /// with weight `z_{l',k}` and unobserved with weight `γ_{l'}`. The
    /// result is affine in every row, so it reproduces the hard denoiser on
    /// one-hot inputs and its partial derivatives equal one-token finite
    /// differences.
    ///
    /// Unmasked vocabulary: the uniform-noise posterior with the token
    /// likelihood extended linearly in `z`.
    pub fn relaxed_denoiser_raw(&self, rows: &[Vec<f64>], alpha_t: f64) -> Result<Vec<Vec<f64>>> {
        if rows.len() != self.length || rows.iter().any(|r| r.len() != self.vocab.size_total()) {
            return Err(Error::Domain("relaxed input has the wrong shape".into()));
        }
        let Some(m) = self.vocab.mask_index() else {
            return Ok(self.udlm_denoiser(rows, alpha_t)?.to_raw());
        };
        let d = self.data_size();
        let gammas: Vec<f64> = rows
            .iter()
            .map(|r| 1.0 - r.iter().enumerate().filter(|(k, _)| *k != m).map(|(_, v)| v).sum::<f64>())
            .collect();
        let mut out = Vec::with_capacity(self.length);
        for l in 0..self.length {
            let mut xt = vec![0.0; d];
            let mut observed = vec![None; self.length];
            let mut visited = 0usize;
            self.relaxed_configs(rows, &gammas, l, 0, 1.0, &mut observed, &mut xt, &mut visited)?;
            let mut row = vec![0.0; self.vocab.size_total()];
            for (k, v) in row.iter_mut().enumerate() {
                if k != m {
                    *v = gammas[l] * xt[self.vocab.data_index(k).unwrap()] + rows[l][k];
                }
            }
            out.push(row);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn relaxed_configs(
        &self,
        rows: &[Vec<f64>],
        gammas: &[f64],
        target: usize,
        pos: usize,
        weight: f64,
        observed: &mut Vec<Option<usize>>,
        acc: &mut [f64],
        visited: &mut usize,
    ) -> Result<()> {
        if pos == self.length {
            *visited += 1;
            if *visited > RELAXED_GUARD {
                return Err(Error::Guard(format!(
                    "relaxed denoiser would enumerate more than {RELAXED_GUARD} configurations"
                )));
            }
            let cond = self.conditional_or_uniform(observed);
            for (a, c) in acc.iter_mut().zip(&cond[target]) {
                *a += weight * c;
            }
            return Ok(());
        }
        if pos == target {
            observed[pos] = None;
            return self.relaxed_configs(rows, gammas, target, pos + 1, weight, observed, acc, visited);
        }
        if gammas[pos] != 0.0 {
            observed[pos] = None;
            self.relaxed_configs(rows, gammas, target, pos + 1, weight * gammas[pos], observed, acc, visited)?;
        }
        for dcat in 0..self.data_size() {
            let w = rows[pos][self.vocab.token_of(dcat)];
            if w != 0.0 {
                observed[pos] = Some(dcat);
                self.relaxed_configs(rows, gammas, target, pos + 1, weight * w, observed, acc, visited)?;
            }
        }
        observed[pos] = None;
        Ok(())
    }

    /// [`Self::relaxed_denoiser_raw`] on a validated relaxed state.
    pub fn relaxed_denoiser(&self, z: &RelaxedState, alpha_t: f64) -> Result<DenoiserOutput> {
        let raw = self.relaxed_denoiser_raw(&z.to_raw(), alpha_t)?;
        Ok(DenoiserOutput {
            rows: raw.into_iter().map(SimplexVector::from_vec_unchecked).collect(),
        })
    }

    /// Uniform-noise Bayes posterior with per-token likelihood
    /// `α z_k + (1-α)/V · Σ_j z_j` for clean category `k`.
    fn udlm_denoiser(&self, rows: &[Vec<f64>], alpha_t: f64) -> Result<DenoiserOutput> {
        let (weights, total) = self.udlm_weights(rows, alpha_t)?;
        let d = self.data_size();
        let mut marg = vec![vec![0.0; d]; self.length];
        if total > 0.0 {
            let mut digits = vec![0usize; self.length];
            for &w in &weights {
                for (l, &x) in digits.iter().enumerate() {
                    marg[l][x] += w;
                }
                advance(&mut digits, d);
            }
            marg.iter_mut().flatten().for_each(|v| *v /= total);
        } else {
            self.zero_evidence.fetch_add(1, Ordering::Relaxed);
            marg.iter_mut().flatten().for_each(|v| *v = 1.0 / d as f64);
        }
        Ok(DenoiserOutput {
            rows: marg
                .into_iter()
                .map(|r| SimplexVector::from_vec_unchecked(self.embed(&r)))
                .collect(),
        })
    }

    fn udlm_likelihoods(&self, rows: &[Vec<f64>], alpha_t: f64) -> Vec<Vec<f64>> {
        let d = self.data_size();
        let b = (1.0 - alpha_t) / d as f64;
        rows.iter()
            .map(|r| {
                let mass: f64 = (0..d).map(|k| r[self.vocab.token_of(k)]).sum();
                (0..d).map(|k| alpha_t * r[self.vocab.token_of(k)] + b * mass).collect()
            })
            .collect()
    }

    fn udlm_weights(&self, rows: &[Vec<f64>], alpha_t: f64) -> Result<(Vec<f64>, f64)> {
        if !(0.0..=1.0).contains(&alpha_t) {
            return Err(Error::Domain(format!("alpha_t {alpha_t} outside [0, 1]")));
        }
        let lik = self.udlm_likelihoods(rows, alpha_t);
        let d = self.data_size();
        let mut digits = vec![0usize; self.length];
        let mut total = 0.0;
        let weights: Vec<f64> = self
            .table
            .iter()
            .map(|&p| {
                let mut w = p;
                for (l, &x) in digits.iter().enumerate() {
                    w *= lik[l][x];
                }
                advance(&mut digits, d);
                total += w;
                w
            })
            .collect();
        Ok((weights, total))
    }

    /// Vector-Jacobian product of the relaxed denoiser at a hard state.
    ///
    /// `upstream[l][i]` is `∂f/∂x_θ(z)^l_i` for some scalar `f`; the result
    /// is `∂f/∂z^{l'}_j` for every position and token.
    pub fn denoiser_pullback(
        &self,
        z: &TokenState,
        alpha_t: f64,
        upstream: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_state(z)?;
        if upstream.len() != self.length
            || upstream.iter().any(|u| u.len() != self.vocab.size_total())
        {
            return Err(Error::Domain("upstream gradient has the wrong shape".into()));
        }
        match self.vocab.mask_index() {
            Some(_) => Ok(self.masked_pullback(z, upstream)),
            None => self.udlm_pullback(z, alpha_t, upstream),
        }
    }

    fn masked_pullback(&self, z: &TokenState, upstream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let v = self.vocab.size_total();
        let d = self.data_size();
        let observed = self.observed_of(z);
        let dot = |u: &[f64], row: &[f64]| -> f64 {
            row.iter()
                .enumerate()
                .map(|(k, p)| u[self.vocab.token_of(k)] * p)
                .sum()
        };
        let mut grad = vec![vec![0.0; v]; self.length];
        for l in 0..self.length {
            let u = &upstream[l];
            let mut obs_l = observed.clone();
            obs_l[l] = None;
            let xt = &self.conditional_or_uniform(&obs_l)[l];
            let base = dot(u, xt);
            // ∂/∂z^l_j of γ_l x̃_l + (1-m)⊙z_l = e_j - x̃_l for data tokens j
            for k in 0..d {
                let tok = self.vocab.token_of(k);
                grad[l][tok] += u[tok] - base;
            }
            if !self.vocab.is_mask(z[l]) {
                continue; // γ_l = 0 gates every cross-token term
            }
            for lp in (0..self.length).filter(|&lp| lp != l) {
                let mut obs = obs_l.clone();
                obs[lp] = None;
                let f_mask = dot(u, &self.conditional_or_uniform(&obs)[l]);
                for k in 0..d {
                    obs[lp] = Some(k);
                    let f_k = dot(u, &self.conditional_or_uniform(&obs)[l]);
                    grad[lp][self.vocab.token_of(k)] += f_k - f_mask;
                }
            }
        }
        grad
    }

    fn udlm_pullback(
        &self,
        z: &TokenState,
        alpha_t: f64,
        upstream: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.data_size();
        let rows = RelaxedState::from_tokens(z, &self.vocab).to_raw();
        let (weights, total) = self.udlm_weights(&rows, alpha_t)?;
        let mut grad = vec![vec![0.0; self.vocab.size_total()]; self.length];
        if total <= 0.0 {
            return Ok(grad);
        }
        let lik = self.udlm_likelihoods(&rows, alpha_t);
        // f(x) = Σ_l u_l[x_l]; need Σ ω and Σ ω f grouped by each position's value
        let mut s1 = vec![vec![0.0; d]; self.length];
        let mut su = vec![vec![0.0; d]; self.length];
        let mut sum_u = 0.0;
        let mut digits = vec![0usize; self.length];
        for &w in &weights {
            if w > 0.0 {
                let f: f64 = digits
                    .iter()
                    .enumerate()
                    .map(|(l, &x)| upstream[l][self.vocab.token_of(x)])
                    .sum();
                sum_u += w * f;
                for (l, &x) in digits.iter().enumerate() {
                    s1[l][x] += w;
                    su[l][x] += w * f;
                }
            }
            advance(&mut digits, d);
        }
        let mean_u = sum_u / total;
        let b = (1.0 - alpha_t) / d as f64;
        for lp in 0..self.length {
            // c_k = Σ_{x: x_l'=k} ω (f - E f) / λ_l'(k)
            let c: Vec<f64> = (0..d)
                .map(|k| {
                    if lik[lp][k] > 0.0 {
                        (su[lp][k] - mean_u * s1[lp][k]) / lik[lp][k]
                    } else {
                        0.0
                    }
                })
                .collect();
            let shared = b * c.iter().sum::<f64>();
            for j in 0..d {
                grad[lp][self.vocab.token_of(j)] = (alpha_t * c[j] + shared) / total;
            }
        }
        Ok(grad)
    }

    /// Plain-text form: a `V L mask` header (`mask` is an index or `none`)
    /// followed by one probability per line in joint-index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# tabular model: V L mask, then one probability per line\n");
        let mask = self
            .vocab
            .mask_index()
            .map_or_else(|| "none".to_string(), |m| m.to_string());
        out.push_str(&format!("{} {} {}\n", self.vocab.size_total(), self.length, mask));
        for p in &self.table {
            out.push_str(&format!("{p:e}\n"));
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut header: Option<(Vocab, usize)> = None;
        let mut table = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let text = line.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            if header.is_none() {
                let parts: Vec<&str> = text.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(parse_err(format!("expected `V L mask`, got `{text}`")));
                }
                let v: usize = parts[0]
                    .parse()
                    .map_err(|_| parse_err(format!("bad vocabulary size `{}`", parts[0])))?;
                let l: usize = parts[1]
                    .parse()
                    .map_err(|_| parse_err(format!("bad length `{}`", parts[1])))?;
                let mask = match parts[2] {
                    "none" => None,
                    s => Some(
                        s.parse::<usize>()
                            .map_err(|_| parse_err(format!("bad mask index `{s}`")))?,
                    ),
                };
                header = Some((Vocab::new(v, mask)?, l));
                continue;
            }
            let p: f64 = text
                .parse()
                .map_err(|_| parse_err(format!("bad probability `{text}`")))?;
            table.push(p);
        }
        let (vocab, length) =
            header.ok_or_else(|| Error::Input("model file has no header".into()))?;
        Self::new(vocab, length, table)
    }
}

#[inline]
fn advance(digits: &mut [usize], base: usize) {
    for l in (0..digits.len()).rev() {
        digits[l] += 1;
        if digits[l] < base {
            return;
        }
        digits[l] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_pair() -> TabularModel {
        // uniform on {(0,0), (1,1)}
        TabularModel::new(Vocab::masked(2).unwrap(), 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap()
    }

    fn small_model() -> TabularModel {
        let table = vec![0.1, 0.05, 0.15, 0.2, 0.02, 0.08, 0.1, 0.1, 0.2];
        TabularModel::new(Vocab::masked(3).unwrap(), 2, table).unwrap()
    }

    #[test]
    fn rejects_bad_tables() {
        let v = Vocab::masked(2).unwrap();
        assert!(TabularModel::new(v, 2, vec![0.5, 0.5]).is_err());
        assert!(TabularModel::new(v, 2, vec![0.5, 0.5, 0.5, -0.5]).is_err());
        assert!(TabularModel::new(v, 2, vec![0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(matches!(
            TabularModel::new(Vocab::masked(64).unwrap(), 5, vec![]),
            Err(Error::Guard(_))
        ));
    }

    #[test]
    fn encode_decode() {
        let m = small_model();
        for i in 0..m.num_states() {
            assert_eq!(m.encode(&m.decode(i)), i);
        }
        assert_eq!(m.encode(&[2, 1]), 7);
    }

    #[test]
    fn fully_masked_gives_marginals() {
        let m = small_model();
        let z = TokenState::all_masked(m.vocab(), 2).unwrap();
        let out = m.bayes_denoiser(&z, 0.3).unwrap();
        for l in 0..2 {
            let row = &out.rows()[l];
            assert_eq!(row[3], 0.0);
            for d in 0..3 {
                assert!((row[d] - m.marginals()[l][d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conditional_by_enumeration() {
        let m = diag_pair();
        let z = TokenState::new(vec![2, 1], m.vocab()).unwrap();
        let out = m.bayes_denoiser(&z, 0.5).unwrap();
        assert_eq!(out.rows()[0].hard_index(), Some(1));
        assert_eq!(out.rows()[1].hard_index(), Some(1));
    }

    #[test]
    fn unmasked_carry_over() {
        let m = small_model();
        let z = TokenState::new(vec![0, 2], m.vocab()).unwrap();
        let out = m.bayes_denoiser(&z, 0.5).unwrap();
        assert_eq!(out.rows()[0].hard_index(), Some(0));
        assert_eq!(out.rows()[1].hard_index(), Some(2));
    }

    #[test]
    fn zero_evidence_falls_back_to_uniform() {
        let m = diag_pair();
        // (0, mask) then ask position 1: fine; but (0,1) table entry is 0
        let z = TokenState::new(vec![0, 2], m.vocab()).unwrap();
        let out = m.bayes_denoiser(&z, 0.5).unwrap();
        assert_eq!(out.rows()[1].hard_index(), Some(0));
        assert_eq!(m.zero_evidence_count(), 0);
        let skewed = TabularModel::new(Vocab::masked(2).unwrap(), 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let z = TokenState::new(vec![1, 2], skewed.vocab()).unwrap();
        let out = skewed.bayes_denoiser(&z, 0.5).unwrap();
        assert!((out.rows()[1][0] - 0.5).abs() < 1e-15);
        assert_eq!(skewed.zero_evidence_count(), 1);
    }

    #[test]
    fn relaxed_agrees_on_hard_states() {
        let m = small_model();
        for a in 0..4 {
            for b in 0..4 {
                let z = TokenState::new(vec![a, b], m.vocab()).unwrap();
                let hard = m.bayes_denoiser(&z, 0.4).unwrap();
                let relaxed = m
                    .relaxed_denoiser(&RelaxedState::from_tokens(&z, m.vocab()), 0.4)
                    .unwrap();
                for (x, y) in hard.rows().iter().zip(relaxed.rows()) {
                    for (p, q) in x.iter().zip(y.iter()) {
                        assert!((p - q).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn relaxed_half_mask_row() {
        let m = small_model();
        // position 0 half mask, half category 2; position 1 masked
        let rows = vec![vec![0.0, 0.0, 0.5, 0.5], vec![0.0, 0.0, 0.0, 1.0]];
        let out = m.relaxed_denoiser_raw(&rows, 0.5).unwrap();
        let xt = &m.conditional(&[None, None]).unwrap()[0];
        for d in 0..3 {
            let expect = 0.5 * xt[d] + if d == 2 { 0.5 } else { 0.0 };
            assert!((out[0][d] - expect).abs() < 1e-15);
        }
        assert_eq!(out[0][3], 0.0);
    }

    #[test]
    fn save_load_roundtrip() {
        let m = small_model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        m.save(&p).unwrap();
        let back = TabularModel::load(&p).unwrap();
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(back.table(), m.table());
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "# c\n3 1 2\n0.5\nabc\n").unwrap();
        match TabularModel::load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn udlm_denoiser_sums_to_one() {
        let m = small_model().with_vocab(Vocab::unmasked(3).unwrap()).unwrap();
        let z = TokenState::new(vec![1, 2], m.vocab()).unwrap();
        for a in [0.0, 0.3, 0.9] {
            let out = m.bayes_denoiser(&z, a).unwrap();
            for r in out.rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // α = 0: no information, marginals
        let out = m.bayes_denoiser(&z, 0.0).unwrap();
        for d in 0..3 {
            assert!((out.rows()[0][d] - m.marginals()[0][d]).abs() < 1e-12);
        }
    }
}
