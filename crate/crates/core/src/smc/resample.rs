use rand::Rng;

use crate::error::{Error, Result};
use crate::types::ParticleSet;

const NORMALIZED_TOL: f64 = 1e-9;

fn check_normalized(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Input("no weights".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Input("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > NORMALIZED_TOL {
        return Err(Error::Input(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `1 / Σ w_i²` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    check_normalized(weights)?;
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Ancestor indices for `count` systematic draws at positions
/// `(u + k) / count` of the cumulative weights, `u ∈ [0, 1)`.
pub fn systematic_indices(weights: &[f64], count: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    let mut cum = weights[0];
    for k in 0..count {
        let pos = (u + k as f64) / count as f64 * total;
        while cum <= pos && i < last_positive {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Full systematic resampling; returns the new set and each slot's ancestor.
pub fn systematic_resample_indexed<R: Rng + ?Sized>(
    particles: &ParticleSet,
    rng: &mut R,
) -> Result<(ParticleSet, Vec<usize>)> {
    let w = particles.weights()?;
    check_normalized(&w)?;
    let n = w.len();
    let ancestors = systematic_indices(&w, n, rng.gen::<f64>());
    let out = ParticleSet {
        states: ancestors.iter().map(|&a| particles.states[a].clone()).collect(),
        log_weights: vec![-(n as f64).ln(); n],
        substream_ids: particles.substream_ids.clone(),
    };
    Ok((out, ancestors))
}

pub fn systematic_resample<R: Rng + ?Sized>(particles: &ParticleSet, rng: &mut R) -> Result<ParticleSet> {
    Ok(systematic_resample_indexed(particles, rng)?.0)
}

/// Resample the `⌊N/2⌋` lowest-weight particles among themselves.
///
/// Each resampled slot carries the subset's mean weight, so the total is
/// unchanged; the remaining particles keep their weights. Returns the new
/// set and each slot's ancestor.
pub fn partial_resample_indexed<R: Rng + ?Sized>(
    particles: &ParticleSet,
    rng: &mut R,
) -> Result<(ParticleSet, Vec<usize>)> {
    let w = particles.weights()?;
    check_normalized(&w)?;
    let n = w.len();
    if n < 2 {
        return Err(Error::Input("partial resampling needs at least 2 particles".into()));
    }
    let half = n / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    let mut subset = order[..half].to_vec();
    subset.sort_unstable();
    let sub_w: Vec<f64> = subset.iter().map(|&i| w[i]).collect();
    let total: f64 = sub_w.iter().sum();
    let mut ancestors: Vec<usize> = (0..n).collect();
    let mut out = particles.clone();
    out.log_weights = w.iter().map(|x| x.ln()).collect();
    let u = rng.gen::<f64>();
    if total > 0.0 {
        let picks = systematic_indices(&sub_w, half, u);
        let mean_log = (total / half as f64).ln();
        for (slot, pick) in subset.iter().zip(picks) {
            let a = subset[pick];
            ancestors[*slot] = a;
            out.states[*slot] = particles.states[a].clone();
            out.log_weights[*slot] = mean_log;
        }
    }
    Ok((out, ancestors))
}

pub fn partial_resample<R: Rng + ?Sized>(particles: &ParticleSet, rng: &mut R) -> Result<ParticleSet> {
    Ok(partial_resample_indexed(particles, rng)?.0)
}
