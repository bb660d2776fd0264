//! Exact enumeration oracles and sample-quality metrics.

mod emd;

pub use emd::{emd, WeightedPoints, MASS_TOL};

use std::collections::{HashMap, HashSet};

use crate::diffusion::{reverse_kernel, ModelFamily, TabularModel};
use crate::error::{Error, Result};
use crate::numeric::log_normalize;
use crate::reward::{exact_estimated_reward, RewardFn};
use crate::schedule::{reverse_steps, NoiseSchedule, TemperSchedule};
use crate::types::{ParticleSet, TokenState};

/// Largest extended (token-space) table the chain and intermediate
/// oracles will build.
pub const EXTENDED_GUARD: usize = 1 << 20;

/// Probability table over `side^length` states, position 0 most
/// significant. Data-space tables use data categories as digits;
/// extended tables use token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistribution {
    side: usize,
    length: usize,
    probs: Vec<f64>,
}

fn checked_pow(side: usize, length: usize, guard: usize) -> Result<usize> {
    (0..length)
        .try_fold(1usize, |acc, _| acc.checked_mul(side).filter(|&n| n <= guard))
        .ok_or_else(|| Error::Guard(format!("{side}^{length} states exceed the guard of {guard}")))
}

impl GridDistribution {
    pub fn new(side: usize, length: usize, probs: Vec<f64>) -> Result<Self> {
        let n = checked_pow(side, length, usize::MAX)?;
        if probs.len() != n {
            return Err(Error::Input(format!(
                "grid table has {} entries, expected {n}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input("grid probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("grid probabilities sum to {total}")));
        }
        Ok(Self { side, length, probs })
    }

    /// The model's data distribution.
    pub fn from_model(model: &TabularModel) -> Self {
        Self {
            side: model.data_size(),
            length: model.length(),
            probs: model.table().to_vec(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.length];
        for l in (0..self.length).rev() {
            out[l] = index % self.side;
            index /= self.side;
        }
        out
    }

    pub fn index_of(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, &d| acc * self.side + d)
    }

    /// Occupied bins as points at their integer coordinates.
    pub fn to_points(&self) -> WeightedPoints {
        let (pts, w): (Vec<Vec<f64>>, Vec<f64>) = self
            .probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (self.digits(i).into_iter().map(|d| d as f64).collect(), *p))
            .unzip();
        WeightedPoints::new(pts, w).expect("grid weights are valid")
    }

    /// Expectation of `f` over states given as data-category digits.
    pub fn expect(&self, mut f: impl FnMut(&[usize]) -> f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| p * f(&self.digits(i)))
            .sum()
    }

    /// Rows indexed by the second coordinate, columns by the first.
    pub fn to_matrix_text(&self) -> Result<String> {
        let (w, h) = self.image_shape()?;
        let mut out = String::new();
        for y in 0..h {
            let row: Vec<String> = (0..w)
                .map(|x| format!("{:e}", self.probs[self.pixel_index(x, y)]))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        Ok(out)
    }

    /// Binary 8-bit graymap, intensities scaled so the largest bin is 255.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let (w, h) = self.image_shape()?;
        let max = self.probs.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let p = self.probs[self.pixel_index(x, y)];
                let v = if max > 0.0 { (255.0 * p / max).round() } else { 0.0 };
                out.push(v as u8);
            }
        }
        Ok(out)
    }

    fn image_shape(&self) -> Result<(usize, usize)> {
        match self.length {
            1 => Ok((self.side, 1)),
            2 => Ok((self.side, self.side)),
            l => Err(Error::Input(format!("cannot draw a table of length {l} as an image"))),
        }
    }

    fn pixel_index(&self, x: usize, y: usize) -> usize {
        if self.length == 1 {
            x
        } else {
            x * self.side + y
        }
    }
}

/// Total variation distance between two tables of the same shape.
pub fn total_variation(a: &GridDistribution, b: &GridDistribution) -> Result<f64> {
    if a.side != b.side || a.length != b.length {
        return Err(Error::Input("distributions differ in shape".into()));
    }
    Ok(0.5 * a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// `π_0(x) ∝ p_0(x) exp(r(x) / α)` over the data space.
pub fn enumerate_target(model: &TabularModel, r: &dyn RewardFn, alpha: f64) -> Result<GridDistribution> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let vocab = model.vocab();
    let logs: Vec<f64> = model
        .table()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                p.ln() + r.value_tokens(&model.state_of(i), vocab) / alpha
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let (normed, _) = log_normalize(&logs)?;
    GridDistribution::new(
        model.data_size(),
        model.length(),
        normed.into_iter().map(f64::exp).collect(),
    )
}

/// Forward-noised marginal `p_t(z) = Σ_x p_0(x) Π_l q(z^l | x^l)` over
/// token space, built one position at a time.
pub fn forward_marginal_table(
    model: &TabularModel,
    family: ModelFamily,
    alpha_t: f64,
) -> Result<GridDistribution> {
    family.check_model(model)?;
    let vocab = *model.vocab();
    let v = vocab.size_total();
    let d = model.data_size();
    let length = model.length();
    checked_pow(v, length, EXTENDED_GUARD)?;
    // q[k][tok]: probability of token `tok` from clean category k
    let q: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut row = vec![0.0; v];
            match vocab.mask_index() {
                Some(m) => {
                    row[vocab.token_of(k)] = alpha_t;
                    row[m] += 1.0 - alpha_t;
                }
                None => {
                    row.iter_mut().for_each(|x| *x = (1.0 - alpha_t) / v as f64);
                    row[k] += alpha_t;
                }
            }
            row
        })
        .collect();
    // tensor with the first `l` axes in token space and the rest in data space
    let mut cur = model.table().to_vec();
    for l in 0..length {
        let outer = v.pow(l as u32);
        let inner = d.pow((length - l - 1) as u32);
        let mut next = vec![0.0; outer * v * inner];
        for o in 0..outer {
            for k in 0..d {
                for i in 0..inner {
                    let p = cur[(o * d + k) * inner + i];
                    if p == 0.0 {
                        continue;
                    }
                    for (tok, &qk) in q[k].iter().enumerate() {
                        if qk != 0.0 {
                            next[(o * v + tok) * inner + i] += p * qk;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    GridDistribution::new(v, length, cur)
}

/// Tempered intermediate target `π_t(z) ∝ p_t(z) exp(λ_t r̂(z) / α)` over
/// token space, with exact `r̂`.
pub fn enumerate_intermediate(
    model: &TabularModel,
    family: ModelFamily,
    r: &dyn RewardFn,
    alpha: f64,
    lambda_t: f64,
    alpha_t: f64,
) -> Result<GridDistribution> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let pt = forward_marginal_table(model, family, alpha_t)?;
    if lambda_t == 0.0 {
        return Ok(pt);
    }
    let tilts = pt
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let z = TokenState::from_vec_unchecked(pt.digits(i));
            Ok(lambda_t * exact_estimated_reward(model, family, r, &z, alpha_t)? / alpha)
        })
        .collect::<Result<Vec<f64>>>()?;
    let top = tilts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numeric("intermediate tilt is not finite".into()));
    }
    let w: Vec<f64> = pt
        .probs()
        .iter()
        .zip(&tilts)
        .map(|(p, t)| if *p > 0.0 { p * (t - top).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate("intermediate target has no mass".into()));
    }
    GridDistribution::new(pt.side(), pt.length(), w.into_iter().map(|x| x / total).collect())
}

/// Exact marginal of ancestral sampling with the reverse kernel, by
/// propagating the full distribution over token space from `t = 1` to 0.
pub fn reverse_chain_marginal(
    model: &TabularModel,
    family: ModelFamily,
    steps: usize,
    noise: NoiseSchedule,
) -> Result<GridDistribution> {
    family.check_model(model)?;
    let vocab = *model.vocab();
    let v = vocab.size_total();
    let length = model.length();
    let n = checked_pow(v, length, EXTENDED_GUARD)?;
    let ext = GridDistribution {
        side: v,
        length,
        probs: Vec::new(),
    };
    let mut dist = vec![0.0; n];
    match family.initial_state(&vocab, length) {
        Some(s) => dist[ext.index_of(&s)] = 1.0,
        None => {
            let p = 1.0 / model.num_states() as f64;
            for i in 0..model.num_states() {
                let s = model.state_of(i);
                dist[ext.index_of(&s)] = p;
            }
        }
    }
    for sp in reverse_steps(steps, noise, TemperSchedule::Zero)? {
        let mut next = vec![0.0; n];
        for (i, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let z = TokenState::from_vec_unchecked(ext.digits(i));
            let rows = reverse_kernel(family, model, &z, sp.alpha_s, sp.alpha_t)?;
            let supports: Vec<Vec<(usize, f64)>> = rows
                .iter()
                .map(|r| r.iter().copied().enumerate().filter(|(_, q)| *q > 0.0).collect())
                .collect();
            let mut idx = vec![0usize; length];
            'outer: loop {
                let mut mass = p;
                let mut flat = 0;
                for (l, &k) in idx.iter().enumerate() {
                    let (tok, q) = supports[l][k];
                    mass *= q;
                    flat = flat * v + tok;
                }
                next[flat] += mass;
                let mut l = length;
                loop {
                    if l == 0 {
                        break 'outer;
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
        dist = next;
    }
    let mut data = vec![0.0; model.num_states()];
    let mut stray = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let z = TokenState::from_vec_unchecked(ext.digits(i));
        match model.index_of(&z) {
            Some(j) => data[j] += p,
            None => stray += p,
        }
    }
    if stray > 1e-12 {
        return Err(Error::Numeric(format!(
            "reverse chain leaves mass {stray} on masked states at t = 0"
        )));
    }
    GridDistribution::new(model.data_size(), length, data)
}

/// Weighted empirical distribution of fully unmasked particles.
pub fn empirical_distribution(particles: &ParticleSet, model: &TabularModel) -> Result<GridDistribution> {
    if particles.is_empty() {
        return Err(Error::Input("empty particle set".into()));
    }
    let w = particles.weights()?;
    let mut probs = vec![0.0; model.num_states()];
    for (s, wi) in particles.states.iter().zip(&w) {
        let j = model
            .index_of(s)
            .ok_or_else(|| Error::Input(format!("particle {s} still has masked tokens")))?;
        probs[j] += wi;
    }
    GridDistribution::new(model.data_size(), model.length(), probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mean_reward: f64,
    pub emd: f64,
    pub diversity: usize,
    pub sample_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mean_reward,emd,diversity,sample_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.mean_reward, self.emd, self.diversity, self.sample_count
        )
    }
}

/// Weighted mean reward, EMD to `target`, and distinct-sample count.
pub fn metrics(
    particles: &ParticleSet,
    model: &TabularModel,
    r: &dyn RewardFn,
    target: &GridDistribution,
) -> Result<MetricReport> {
    let emp = empirical_distribution(particles, model)?;
    let w = particles.weights()?;
    let mean_reward = particles
        .states
        .iter()
        .zip(&w)
        .map(|(s, wi)| wi * r.value_tokens(s, model.vocab()))
        .sum();
    let diversity = particles.states.iter().collect::<HashSet<_>>().len();
    Ok(MetricReport {
        mean_reward,
        emd: emd(&emp.to_points(), &target.to_points())?,
        diversity,
        sample_count: particles.len(),
    })
}

/// Distinct states with their total weight, in first-occurrence order.
pub fn aggregate_states(particles: &ParticleSet) -> Result<Vec<(TokenState, f64)>> {
    let w = particles.weights()?;
    let mut index: HashMap<&TokenState, usize> = HashMap::new();
    let mut out: Vec<(TokenState, f64)> = Vec::new();
    for (s, wi) in particles.states.iter().zip(w) {
        match index.get(s) {
            Some(&k) => out[k].1 += wi,
            None => {
                index.insert(s, out.len());
                out.push((s.clone(), wi));
            }
        }
    }
    Ok(out)
}
