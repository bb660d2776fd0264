//! Twisted SMC driver: propose, reweight, normalize, resample.

mod resample;

pub use resample::{
    effective_sample_size, partial_resample, partial_resample_indexed, systematic_indices,
    systematic_resample, systematic_resample_indexed,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::diffusion::{ModelFamily, TabularModel};
use crate::error::{Error, Result};
use crate::numeric::{log_normalize, log_sum_exp};
use crate::proposal::{prepare, ProposalKind, RewardMemo, StepContext};
use crate::reward::{GumbelConfig, RewardFn};
use crate::rng::RngStream;
use crate::schedule::{reverse_steps, NoiseSchedule, TemperSchedule};
use crate::types::{ParticleSet, TokenState};

const STREAM_INIT: u64 = 0;
const STREAM_PROPOSE: u64 = 1;
const STREAM_RESAMPLE: u64 = 2;

/// `log w_s = log w_t + log p_θ - log F + (λ_s r̂_s - λ_t r̂_t) / α`.
#[allow(clippy::too_many_arguments)]
pub fn weight_update(
    log_w_t: f64,
    log_reverse_mass: f64,
    log_proposal_mass: f64,
    r_hat_s: f64,
    r_hat_t: f64,
    lambda_s: f64,
    lambda_t: f64,
    alpha: f64,
) -> f64 {
    log_w_t + (log_reverse_mass - log_proposal_mass) + (lambda_s * r_hat_s - lambda_t * r_hat_t) / alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKind {
    FullSystematic,
    PartialSystematic,
}

impl ResampleKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullSystematic => "full_systematic",
            Self::PartialSystematic => "partial_systematic",
        }
    }
}

impl fmt::Display for ResampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_systematic" | "full" => Ok(Self::FullSystematic),
            "partial_systematic" | "partial" => Ok(Self::PartialSystematic),
            _ => Err(Error::Config(format!(
                "unknown resampling scheme `{s}` (expected full_systematic or partial_systematic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleScheme {
    pub kind: ResampleKind,
    /// Resample when ESS falls strictly below this.
    pub ess_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub t: f64,
    pub lambda: f64,
    pub mean_rhat: f64,
    pub ess: f64,
    pub resampled: bool,
    pub logz_increment: f64,
}

impl StepTrace {
    pub const CSV_HEADER: &'static str = "step,t,lambda,mean_rhat,ess,resampled,logz_increment";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.t,
            self.lambda,
            self.mean_rhat,
            self.ess,
            u8::from(self.resampled),
            self.logz_increment
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub particles: usize,
    pub steps: usize,
    pub proposal: ProposalKind,
    /// KL weight `α`.
    pub kl_weight: f64,
    pub noise: NoiseSchedule,
    pub temper: TemperSchedule,
    pub resample: ResampleScheme,
    pub gumbel: GumbelConfig,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl SmcConfig {
    pub fn new(particles: usize, steps: usize, proposal: ProposalKind) -> Self {
        Self {
            particles,
            steps,
            proposal,
            kl_weight: 1.0,
            noise: NoiseSchedule::Linear,
            temper: TemperSchedule::Linear,
            resample: ResampleScheme {
                kind: ResampleKind::FullSystematic,
                ess_min: particles as f64 / 2.0,
            },
            gumbel: GumbelConfig::default(),
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("need at least one particle".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("need at least one time step".into()));
        }
        if !(self.kl_weight > 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.kl_weight)));
        }
        let n = self.particles as f64;
        if !(1.0..=n).contains(&self.resample.ess_min) {
            return Err(Error::Config(format!(
                "ess_min {} outside [1, {}]",
                self.resample.ess_min, self.particles
            )));
        }
        if self.resample.kind == ResampleKind::PartialSystematic && self.particles < 2 {
            return Err(Error::Config("partial resampling needs at least 2 particles".into()));
        }
        self.temper.validate()?;
        self.gumbel.validate()
    }

    /// Guidance-only sampling: no reweighting and no resampling.
    pub fn guidance_only(&self) -> bool {
        self.proposal == ProposalKind::ApproxGuidance
    }
}

#[derive(Debug, Clone)]
pub struct SmcOutput {
    pub particles: ParticleSet,
    /// `r̂` of each final particle.
    pub r_hat: Vec<f64>,
    pub traces: Vec<StepTrace>,
    /// Sum of the per-step log normalizer increments.
    pub log_normalizer: f64,
    /// Per step, each particle's log incremental weight.
    pub increments: Vec<Vec<f64>>,
    /// Per step, the index of each particle's parent among the distinct
    /// parent states of that step.
    pub parent_groups: Vec<Vec<usize>>,
}

impl SmcOutput {
    pub fn resample_count(&self) -> usize {
        self.traces.iter().filter(|t| t.resampled).count()
    }
}

/// Distinct states in first-occurrence order, plus each input's group.
fn group_states(states: &[TokenState]) -> (Vec<TokenState>, Vec<usize>) {
    let mut index: HashMap<&TokenState, usize> = HashMap::new();
    let mut unique = Vec::new();
    let groups = states
        .iter()
        .map(|s| {
            *index.entry(s).or_insert_with(|| {
                unique.push(s.clone());
                unique.len() - 1
            })
        })
        .collect();
    (unique, groups)
}

fn initial_states(
    family: ModelFamily,
    model: &TabularModel,
    n: usize,
    stream: &RngStream,
) -> Result<Vec<TokenState>> {
    let vocab = model.vocab();
    if let Some(s) = family.initial_state(vocab, model.length()) {
        return Ok(vec![s; n]);
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream.descend(&[STREAM_INIT, i as u64]).rng();
            let toks = (0..model.length())
                .map(|_| vocab.token_of(rng.gen_range(0..vocab.data_size())))
                .collect();
            TokenState::from_vec_unchecked(toks)
        })
        .collect())
}

/// Run twisted SMC from `t = 1` to `t = 0`.
pub fn run_smc(
    config: &SmcConfig,
    model: &TabularModel,
    family: ModelFamily,
    reward: &dyn RewardFn,
    seed: u64,
) -> Result<SmcOutput> {
    config.validate()?;
    family.check_model(model)?;
    if config.workers == 0 {
        return run_inner(config, model, family, reward, seed);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_inner(config, model, family, reward, seed))
}

fn run_inner(
    config: &SmcConfig,
    model: &TabularModel,
    family: ModelFamily,
    reward: &dyn RewardFn,
    seed: u64,
) -> Result<SmcOutput> {
    let n = config.particles;
    let stream = RngStream::new(seed);
    let steps = reverse_steps(config.steps, config.noise, config.temper)?;
    let guidance = config.guidance_only();

    let mut particles = ParticleSet::uniform(initial_states(family, model, n, &stream)?);
    let first = steps[0];
    let init_memo = RewardMemo::with_parts(
        model,
        family,
        reward,
        config.gumbel,
        &stream,
        first.tau,
        first.alpha_t,
    );
    let mut r_hat: Vec<f64> = particles
        .states
        .par_iter()
        .map(|s| init_memo.get(s))
        .collect::<Result<_>>()?;
    drop(init_memo);

    let mut traces = Vec::with_capacity(steps.len());
    let mut increments = Vec::with_capacity(steps.len());
    let mut parent_groups = Vec::with_capacity(steps.len());
    let mut log_normalizer = 0.0;

    for sp in &steps {
        let ctx = StepContext {
            model,
            family,
            reward,
            step: *sp,
            kl_weight: config.kl_weight,
            gumbel: config.gumbel,
            stream: &stream,
        };
        let memo = RewardMemo::new(&ctx, sp.tau - 1, sp.alpha_s);
        let (parents, groups) = group_states(&particles.states);
        let prepared = parents
            .par_iter()
            .map(|z| prepare(config.proposal, &ctx, z, Some(&memo)))
            .collect::<Result<Vec<_>>>()?;

        let moved = (0..n)
            .into_par_iter()
            .map(|i| {
                let id = particles.substream_ids[i];
                let mut rng = stream.descend(&[STREAM_PROPOSE, sp.tau as u64, id]).rng();
                let tr = prepared[groups[i]].sample(&mut rng);
                let r_next = match tr.r_hat_next {
                    Some(v) => v,
                    None => memo.get(&tr.next_state)?,
                };
                Ok((tr, r_next))
            })
            .collect::<Result<Vec<_>>>()?;

        let old_log_w = particles.log_weights.clone();
        let mut new_log_w = Vec::with_capacity(n);
        let mut inc = Vec::with_capacity(n);
        let mut next_states = Vec::with_capacity(n);
        let mut next_r = Vec::with_capacity(n);
        for (i, (tr, r_s)) in moved.into_iter().enumerate() {
            let lw = if guidance {
                old_log_w[i]
            } else {
                weight_update(
                    old_log_w[i],
                    tr.log_reverse_mass,
                    tr.log_proposal_mass,
                    r_s,
                    r_hat[i],
                    sp.lambda_s,
                    sp.lambda_t,
                    config.kl_weight,
                )
            };
            inc.push(lw - old_log_w[i]);
            new_log_w.push(lw);
            next_states.push(tr.next_state);
            next_r.push(r_s);
        }

        let logz_increment = log_sum_exp(&new_log_w) - log_sum_exp(&old_log_w);
        let normalized = log_normalize(&new_log_w).map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate(format!(
                "all particle weights vanished at step {} (t = {}); last trace: {}",
                sp.tau,
                sp.t,
                traces
                    .last()
                    .map_or_else(|| "none".to_string(), |t: &StepTrace| t.csv_row())
            )),
            other => other,
        })?;
        particles.states = next_states;
        particles.log_weights = normalized.0;
        r_hat = next_r;
        log_normalizer += logz_increment;

        let w = particles.weights()?;
        let ess = effective_sample_size(&w)?;
        let mean_rhat = w.iter().zip(&r_hat).map(|(a, b)| a * b).sum();
        let resampled = !guidance && ess < config.resample.ess_min;
        if resampled {
            let mut rng = stream.descend(&[STREAM_RESAMPLE, sp.tau as u64]).rng();
            let (next, ancestors) = match config.resample.kind {
                ResampleKind::FullSystematic => systematic_resample_indexed(&particles, &mut rng)?,
                ResampleKind::PartialSystematic => partial_resample_indexed(&particles, &mut rng)?,
            };
            r_hat = ancestors.iter().map(|&a| r_hat[a]).collect();
            particles = next;
        }
        traces.push(StepTrace {
            step: sp.tau,
            t: sp.t,
            lambda: sp.lambda_t,
            mean_rhat,
            ess,
            resampled,
            logz_increment,
        });
        increments.push(inc);
        parent_groups.push(groups);
    }

    Ok(SmcOutput {
        particles,
        r_hat,
        traces,
        log_normalizer,
        increments,
        parent_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::LinearReward;
    use crate::types::Vocab;

    #[test]
    fn weight_update_examples() {
        assert_eq!(weight_update(-1.5, -0.3, -0.3, 2.0, 7.0, 0.0, 0.0, 1.0), -1.5);
        let c = 3.0;
        let v = weight_update(0.25, -0.7, -0.7, c, c, 1.0, 0.5, 1.0);
        assert!((v - (0.25 + 0.5 * c)).abs() < 1e-15);
    }

    fn tiny() -> (TabularModel, LinearReward) {
        let model =
            TabularModel::new(Vocab::masked(4).unwrap(), 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = LinearReward::new(vec![vec![0.0, 1.0, 0.5, -1.0, 0.0]], 0.0).unwrap();
        (model, r)
    }

    #[test]
    fn weights_normalized_and_ess_bounded() {
        let (model, r) = tiny();
        for kind in ProposalKind::ALL {
            let cfg = SmcConfig::new(16, 8, kind);
            let out = run_smc(&cfg, &model, ModelFamily::Masked, &r, 5).unwrap();
            let w = out.particles.weights().unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for t in &out.traces {
                assert!(t.ess >= 1.0 - 1e-9 && t.ess <= 16.0 + 1e-9);
            }
            assert!(out.particles.states.iter().all(|s| s.count_masked(model.vocab()) == 0));
        }
    }

    #[test]
    fn guidance_keeps_uniform_weights() {
        let (model, r) = tiny();
        let cfg = SmcConfig::new(8, 8, ProposalKind::ApproxGuidance);
        let out = run_smc(&cfg, &model, ModelFamily::Masked, &r, 1).unwrap();
        for w in out.particles.weights().unwrap() {
            assert!((w - 0.125).abs() < 1e-15);
        }
        assert_eq!(out.resample_count(), 0);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (model, r) = tiny();
        let mut cfg = SmcConfig::new(32, 8, ProposalKind::Taylor);
        cfg.workers = 1;
        let a = run_smc(&cfg, &model, ModelFamily::Masked, &r, 9).unwrap();
        cfg.workers = 4;
        let b = run_smc(&cfg, &model, ModelFamily::Masked, &r, 9).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SmcConfig::new(4, 4, ProposalKind::Reverse);
        cfg.kl_weight = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SmcConfig::new(4, 4, ProposalKind::Reverse);
        cfg.resample.ess_min = 5.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn udlm_runs() {
        let (model, r) = tiny();
        let model = model.with_vocab(Vocab::unmasked(4).unwrap()).unwrap();
        let r = LinearReward::new(vec![r.coeffs()[0][..4].to_vec()], 0.0).unwrap();
        for kind in ProposalKind::ALL {
            let cfg = SmcConfig::new(8, 8, kind);
            run_smc(&cfg, &model, ModelFamily::Udlm, &r, 2).unwrap();
        }
    }
}
