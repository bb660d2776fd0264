//! Transition proposals for one reverse step `t -> s`.
//!
//! A proposal is first prepared for a parent state `z_t` (kernel rows,
//! gradients, or the enumerated successor table) and then sampled any
//! number of times. Preparation is deterministic given the step and the
//! parent, so particles sharing a parent share the prepared proposal.

mod memo;

pub use memo::{state_key, RewardMemo};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffusion::{kernel_from_denoiser, ModelFamily, TabularModel};
use crate::error::{Error, Result};
use crate::numeric::{floored_ln, log_normalize};
use crate::reward::{taylor_gradient, GumbelConfig, RewardFn};
use crate::rng::{sample_categorical, Cumulative, RngStream};
use crate::schedule::StepPair;
use crate::types::{SimplexVector, TokenState};

/// Largest joint successor support the locally optimal proposal enumerates.
pub const LOCALLY_OPTIMAL_GUARD: usize = 1 << 20;

/// Stream labels for the per-step deterministic substreams.
pub(crate) const STREAM_GRADIENT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalKind {
    Reverse,
    LocallyOptimal,
    Taylor,
    ApproxGuidance,
}

impl ProposalKind {
    pub const ALL: [ProposalKind; 4] = [
        ProposalKind::Reverse,
        ProposalKind::LocallyOptimal,
        ProposalKind::Taylor,
        ProposalKind::ApproxGuidance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Reverse => "reverse",
            Self::LocallyOptimal => "locally_optimal",
            Self::Taylor => "taylor",
            Self::ApproxGuidance => "approx_guidance",
        }
    }
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProposalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown proposal `{s}` (expected reverse, locally_optimal, taylor or approx_guidance)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionResult {
    pub next_state: TokenState,
    pub log_proposal_mass: f64,
    pub log_reverse_mass: f64,
    /// `r̂(z_s)` when the proposal already computed it.
    pub r_hat_next: Option<f64>,
}

/// Everything a proposal needs to know about the current step.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub model: &'a TabularModel,
    pub family: ModelFamily,
    pub reward: &'a dyn RewardFn,
    pub step: StepPair,
    /// KL weight `α`.
    pub kl_weight: f64,
    pub gumbel: GumbelConfig,
    /// Root stream; gradient draws use a substream keyed by step and parent.
    pub stream: &'a RngStream,
}

impl StepContext<'_> {
    fn reverse_rows(&self, z_t: &TokenState) -> Result<Vec<SimplexVector>> {
        let den = self.model.bayes_denoiser(z_t, self.step.alpha_t)?;
        kernel_from_denoiser(
            self.family,
            self.model.vocab(),
            z_t,
            &den,
            self.step.alpha_s,
            self.step.alpha_t,
        )
    }

    fn gradient_stream(&self, z_t: &TokenState) -> RngStream {
        self.stream.descend(&[
            STREAM_GRADIENT,
            self.step.tau as u64,
            state_key(z_t, self.model.vocab().size_total()),
        ])
    }
}

/// A proposal prepared for one parent state.
#[derive(Debug, Clone)]
pub enum PreparedProposal {
    /// Independent per-position draws from `proposal`; `reverse` holds the
    /// reverse kernel rows for the weight's first factor.
    Factorized {
        reverse: Vec<SimplexVector>,
        proposal: Option<Vec<Vec<f64>>>,
    },
    /// Explicit joint successor table.
    Joint(JointTable),
}

/// Enumerated successors with reverse log-mass and proposal log-mass.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub candidates: Vec<TokenState>,
    pub log_reverse: Vec<f64>,
    pub log_proposal: Vec<f64>,
    pub r_hat: Vec<f64>,
    /// `log Σ p_θ(z_s|z_t) exp(λ_s r̂(z_s)/α)`.
    pub log_z: f64,
    cumulative: Cumulative,
}

impl PreparedProposal {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TransitionResult {
        match self {
            Self::Factorized { reverse, proposal } => {
                let mut tokens = Vec::with_capacity(reverse.len());
                let mut log_rev = 0.0;
                let mut log_prop = 0.0;
                for (l, row) in reverse.iter().enumerate() {
                    let (tok, lp) = match proposal {
                        None => {
                            let tok = sample_categorical(row, rng);
                            (tok, floored_ln(row[tok]))
                        }
                        Some(q) => {
                            let tok = sample_categorical(&q[l], rng);
                            (tok, floored_ln(q[l][tok]))
                        }
                    };
                    log_rev += floored_ln(row[tok]);
                    log_prop += lp;
                    tokens.push(tok);
                }
                TransitionResult {
                    next_state: TokenState::from_vec_unchecked(tokens),
                    log_proposal_mass: if proposal.is_none() { log_rev } else { log_prop },
                    log_reverse_mass: log_rev,
                    r_hat_next: None,
                }
            }
            Self::Joint(t) => {
                let i = t.cumulative.sample(rng);
                TransitionResult {
                    next_state: t.candidates[i].clone(),
                    log_proposal_mass: t.log_proposal[i],
                    log_reverse_mass: t.log_reverse[i],
                    r_hat_next: Some(t.r_hat[i]),
                }
            }
        }
    }

    /// Per-position proposal distributions, when factorized.
    pub fn factor_rows(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            Self::Factorized { reverse, proposal } => Some(
                proposal
                    .clone()
                    .unwrap_or_else(|| reverse.iter().map(|r| r.to_vec()).collect()),
            ),
            Self::Joint(_) => None,
        }
    }
}

/// Prepare `kind` for the parent `z_t`. `memo` caches `r̂` at level `s`
/// and is required by the locally optimal proposal.
pub fn prepare(
    kind: ProposalKind,
    ctx: &StepContext<'_>,
    z_t: &TokenState,
    memo: Option<&RewardMemo<'_>>,
) -> Result<PreparedProposal> {
    match kind {
        ProposalKind::Reverse => Ok(PreparedProposal::Factorized {
            reverse: ctx.reverse_rows(z_t)?,
            proposal: None,
        }),
        ProposalKind::Taylor => prepare_tilted(ctx, z_t, ctx.step.lambda_s),
        ProposalKind::ApproxGuidance => prepare_tilted(ctx, z_t, 1.0),
        ProposalKind::LocallyOptimal => {
            let memo = memo.ok_or_else(|| {
                Error::Config("locally optimal proposal needs a reward memo".into())
            })?;
            Ok(PreparedProposal::Joint(joint_table(ctx, z_t, memo)?))
        }
    }
}

fn prepare_tilted(ctx: &StepContext<'_>, z_t: &TokenState, lambda: f64) -> Result<PreparedProposal> {
    let reverse = ctx.reverse_rows(z_t)?;
    let scale = lambda / ctx.kl_weight;
    if scale == 0.0 {
        return Ok(PreparedProposal::Factorized {
            reverse,
            proposal: None,
        });
    }
    let (_, grad) = taylor_gradient(
        ctx.model,
        ctx.family,
        ctx.reward,
        z_t,
        ctx.step.alpha_t,
        &ctx.gumbel,
        &ctx.gradient_stream(z_t),
    )?;
    let proposal = tilt_rows(&reverse, &grad.matrix, scale)?;
    Ok(PreparedProposal::Factorized {
        reverse,
        proposal: Some(proposal),
    })
}

/// Per-position `p_l(j) exp(scale · g_l(j))`, normalized; zero where `p_l`
/// is zero.
pub fn tilt_rows(reverse: &[SimplexVector], grad: &[Vec<f64>], scale: f64) -> Result<Vec<Vec<f64>>> {
    reverse
        .iter()
        .zip(grad)
        .map(|(row, g)| {
            let logits: Vec<f64> = row
                .iter()
                .zip(g)
                .map(|(&p, &gj)| if p > 0.0 { p.ln() + scale * gj } else { f64::NEG_INFINITY })
                .collect();
            let (normed, _) = log_normalize(&logits)?;
            Ok(normed.into_iter().map(f64::exp).collect())
        })
        .collect()
}

fn joint_table(ctx: &StepContext<'_>, z_t: &TokenState, memo: &RewardMemo<'_>) -> Result<JointTable> {
    let reverse = ctx.reverse_rows(z_t)?;
    let supports: Vec<Vec<usize>> = reverse
        .iter()
        .map(|r| (0..r.len()).filter(|&j| r[j] > 0.0).collect())
        .collect();
    let size = supports.iter().try_fold(1usize, |acc, s| {
        acc.checked_mul(s.len()).filter(|&n| n <= LOCALLY_OPTIMAL_GUARD)
    });
    let Some(size) = size else {
        return Err(Error::Guard(format!(
            "locally optimal proposal would enumerate more than {LOCALLY_OPTIMAL_GUARD} successors; use the taylor proposal"
        )));
    };
    let scale = ctx.step.lambda_s / ctx.kl_weight;
    let mut candidates = Vec::with_capacity(size);
    let mut log_reverse = Vec::with_capacity(size);
    let mut r_hat = Vec::with_capacity(size);
    let mut idx = vec![0usize; supports.len()];
    'outer: loop {
        let tokens: Vec<usize> = idx.iter().zip(&supports).map(|(&k, s)| s[k]).collect();
        let lr: f64 = tokens
            .iter()
            .zip(&reverse)
            .map(|(&t, row)| floored_ln(row[t]))
            .sum();
        let state = TokenState::from_vec_unchecked(tokens);
        r_hat.push(memo.get(&state)?);
        log_reverse.push(lr);
        candidates.push(state);
        let mut l = supports.len();
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
    let scores: Vec<f64> = log_reverse
        .iter()
        .zip(&r_hat)
        .map(|(lr, r)| lr + scale * r)
        .collect();
    let (log_proposal, log_z) = log_normalize(&scores)?;
    let probs: Vec<f64> = log_proposal.iter().map(|v| v.exp()).collect();
    Ok(JointTable {
        candidates,
        log_reverse,
        log_proposal,
        r_hat,
        log_z,
        cumulative: Cumulative::new(&probs),
    })
}

/// Reverse-process draw from precomputed kernel rows.
pub fn propose_reverse<R: Rng + ?Sized>(rows: &[SimplexVector], rng: &mut R) -> TransitionResult {
    PreparedProposal::Factorized {
        reverse: rows.to_vec(),
        proposal: None,
    }
    .sample(rng)
}

pub fn propose_locally_optimal<R: Rng + ?Sized>(
    ctx: &StepContext<'_>,
    z_t: &TokenState,
    memo: &RewardMemo<'_>,
    rng: &mut R,
) -> Result<TransitionResult> {
    Ok(prepare(ProposalKind::LocallyOptimal, ctx, z_t, Some(memo))?.sample(rng))
}

pub fn propose_taylor<R: Rng + ?Sized>(
    ctx: &StepContext<'_>,
    z_t: &TokenState,
    rng: &mut R,
) -> Result<TransitionResult> {
    Ok(prepare(ProposalKind::Taylor, ctx, z_t, None)?.sample(rng))
}

pub fn propose_guidance<R: Rng + ?Sized>(
    ctx: &StepContext<'_>,
    z_t: &TokenState,
    rng: &mut R,
) -> Result<TransitionResult> {
    Ok(prepare(ProposalKind::ApproxGuidance, ctx, z_t, None)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::LinearReward;
    use crate::schedule::{reverse_steps, NoiseSchedule, TemperSchedule};
    use crate::types::Vocab;

    fn step(lambda_s: f64) -> StepPair {
        StepPair {
            tau: 3,
            s: 0.5,
            t: 0.75,
            alpha_s: 0.5,
            alpha_t: 0.25,
            lambda_s,
            lambda_t: 0.25,
        }
    }

    #[test]
    fn reverse_on_unmasked_is_deterministic() {
        let rows = vec![SimplexVector::one_hot(3, 1), SimplexVector::one_hot(3, 0)];
        let mut rng = RngStream::new(0).rng();
        let tr = propose_reverse(&rows, &mut rng);
        assert_eq!(tr.next_state.tokens(), &[1, 0]);
        assert_eq!(tr.log_proposal_mass, 0.0);
        assert_eq!(tr.log_reverse_mass, 0.0);
    }

    #[test]
    fn taylor_tilt_example() {
        let reverse = vec![SimplexVector::new(vec![0.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap()];
        let grad = vec![vec![0.0, 2f64.ln(), 0.0]];
        let q = tilt_rows(&reverse, &grad, 1.0).unwrap();
        assert!((q[0][1] - 0.5).abs() < 1e-15);
        assert!((q[0][2] - 0.5).abs() < 1e-15);
        assert_eq!(q[0][0], 0.0);
    }

    #[test]
    fn locally_optimal_two_successor_toy() {
        // L=1, data {0,1}, uniform p0; fully masked with α_s = 1 gives equal
        // reverse mass on both categories.
        let model = TabularModel::new(Vocab::masked(2).unwrap(), 1, vec![0.5, 0.5]).unwrap();
        let r = LinearReward::new(vec![vec![0.0, 2f64.ln(), 0.0]], 0.0).unwrap();
        let stream = RngStream::new(1);
        let mut sp = step(1.0);
        sp.alpha_s = 1.0;
        let ctx = StepContext {
            model: &model,
            family: ModelFamily::Masked,
            reward: &r,
            step: sp,
            kl_weight: 1.0,
            gumbel: GumbelConfig::default(),
            stream: &stream,
        };
        let memo = RewardMemo::new(&ctx, sp.tau - 1, sp.alpha_s);
        let z = TokenState::all_masked(model.vocab(), 1).unwrap();
        let PreparedProposal::Joint(t) = prepare(ProposalKind::LocallyOptimal, &ctx, &z, Some(&memo)).unwrap() else {
            panic!()
        };
        assert_eq!(t.candidates.len(), 2);
        assert!((t.log_proposal[0].exp() - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.log_proposal[1].exp() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_matches_reverse() {
        let model = TabularModel::new(Vocab::masked(3).unwrap(), 2, vec![1.0 / 9.0; 9]).unwrap();
        let r = LinearReward::new(vec![vec![1.0, 2.0, 3.0, 0.0]; 2], 0.0).unwrap();
        let stream = RngStream::new(1);
        let ctx = StepContext {
            model: &model,
            family: ModelFamily::Masked,
            reward: &r,
            step: step(0.0),
            kl_weight: 1.0,
            gumbel: GumbelConfig::default(),
            stream: &stream,
        };
        let z = TokenState::all_masked(model.vocab(), 2).unwrap();
        let rev = prepare(ProposalKind::Reverse, &ctx, &z, None).unwrap().factor_rows().unwrap();
        let tay = prepare(ProposalKind::Taylor, &ctx, &z, None).unwrap().factor_rows().unwrap();
        assert_eq!(rev, tay);
        let memo = RewardMemo::new(&ctx, 2, 0.5);
        let PreparedProposal::Joint(t) = prepare(ProposalKind::LocallyOptimal, &ctx, &z, Some(&memo)).unwrap() else {
            panic!()
        };
        for (a, b) in t.log_proposal.iter().zip(&t.log_reverse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn locally_optimal_guard() {
        // 34^4 successors exceed the guard
        let n = 33usize.pow(4);
        let model =
            TabularModel::new(Vocab::masked(33).unwrap(), 4, vec![1.0 / n as f64; n]).unwrap();
        let r = LinearReward::new(vec![vec![0.0; 34]; 4], 0.0).unwrap();
        let stream = RngStream::new(1);
        let steps = reverse_steps(10, NoiseSchedule::Linear, TemperSchedule::Linear).unwrap();
        let ctx = StepContext {
            model: &model,
            family: ModelFamily::Masked,
            reward: &r,
            step: steps[0],
            kl_weight: 1.0,
            gumbel: GumbelConfig::default(),
            stream: &stream,
        };
        let memo = RewardMemo::new(&ctx, 9, steps[0].alpha_s);
        let z = TokenState::all_masked(model.vocab(), 4).unwrap();
        let err = prepare(ProposalKind::LocallyOptimal, &ctx, &z, Some(&memo)).unwrap_err();
        assert!(matches!(err, Error::Guard(_)));
    }

    #[test]
    fn kind_parsing() {
        for k in ProposalKind::ALL {
            assert_eq!(k.name().parse::<ProposalKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ProposalKind>().is_err());
    }
}
