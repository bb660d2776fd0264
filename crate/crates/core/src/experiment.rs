//! Run configuration, experiment runner and output files.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment.
//! Every output is rewritten whole through a temporary file and a rename.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{build_gmm_table, GmmComponent, GmmSpec};
use crate::diffusion::{ModelFamily, TabularModel, DEFAULT_ETA_CAP};
use crate::error::{Error, Result};
use crate::eval::{empirical_distribution, enumerate_target, metrics, MetricReport};
use crate::proposal::ProposalKind;
use crate::reward::{gmm_reward, GridRewardPreset, GumbelConfig, LinearReward};
use crate::schedule::{NoiseSchedule, TemperSchedule};
use crate::smc::{run_smc, ResampleKind, ResampleScheme, SmcConfig, SmcOutput, StepTrace};
use crate::types::ParticleSet;

pub const FORMAT_VERSION: u32 = 1;

/// Documented defaults, shown by the command-line `--help`.
pub const CONFIG_HELP: &str = "\
Configuration keys (flat `key = value`, `#` comments):
  particles        number of particles N                      (required)
  steps            number of time steps T                     (required)
  family           masked | remdm | udlm                      [masked]
  eta_cap          remdm remasking cap                        [0.1]
  proposal         reverse | locally_optimal | taylor | approx_guidance
                                                              [locally_optimal]
  proposals        comma list used by `compare`               [all four]
  alpha            KL weight, > 0                             [1]
  temper           linear | exp_capped | zero                 [linear]
  temper_base      base b of exp_capped                       [1.05]
  temper_steps     exponent scale of exp_capped               [steps]
  noise            linear                                     [linear]
  ess_min          resampling threshold in [1, N]             [N/2]
  resample         full | partial                             [full]
  gumbel_tau       Gumbel-softmax temperature                 [0.5]
  gumbel_samples   Monte Carlo samples K                      [100]
  seed             master seed                                [0]
  workers          worker threads, 0 = all cores              [0]
  model_file       tabular model file (replaces the mixture)
  grid_size        mixture grid side                          [64]
  component        `mx my cxx cxy cyy weight`, repeatable     [4 default blobs]
  reward           top | bottom | custom | none               [top]
  reward_weights   `wx wy` for reward = custom
  reward_offsets   `ox oy` for reward = custom
  out              output directory                           [out]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperKind {
    Linear,
    ExpCapped,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    Preset(GridRewardPreset),
    Custom { weights: (f64, f64), offsets: (f64, f64) },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Gmm(GmmSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: ModelFamily,
    pub proposal: ProposalKind,
    pub proposals: Vec<ProposalKind>,
    pub particles: usize,
    pub steps: usize,
    pub alpha: f64,
    pub temper: TemperKind,
    pub temper_base: f64,
    pub temper_steps: Option<usize>,
    pub noise: NoiseSchedule,
    pub ess_min: Option<f64>,
    pub resample: ResampleKind,
    pub gumbel: GumbelConfig,
    pub seed: u64,
    pub workers: usize,
    pub model: ModelSource,
    pub reward: RewardSpec,
    pub out: PathBuf,
}

impl RunConfig {
    /// Defaults for everything except the two required keys.
    pub fn new(particles: usize, steps: usize) -> Self {
        Self {
            family: ModelFamily::Masked,
            proposal: ProposalKind::LocallyOptimal,
            proposals: ProposalKind::ALL.to_vec(),
            particles,
            steps,
            alpha: 1.0,
            temper: TemperKind::Linear,
            temper_base: 1.05,
            temper_steps: None,
            noise: NoiseSchedule::Linear,
            ess_min: None,
            resample: ResampleKind::FullSystematic,
            gumbel: GumbelConfig::default(),
            seed: 0,
            workers: 0,
            model: ModelSource::Gmm(GmmSpec::default()),
            reward: RewardSpec::Preset(GridRewardPreset::Top),
            out: PathBuf::from("out"),
        }
    }

    pub fn temper_schedule(&self) -> Result<TemperSchedule> {
        Ok(match self.temper {
            TemperKind::Linear => TemperSchedule::Linear,
            TemperKind::Zero => TemperSchedule::Zero,
            TemperKind::ExpCapped => {
                TemperSchedule::exp_capped(self.temper_base, self.temper_steps.unwrap_or(self.steps))?
            }
        })
    }

    pub fn smc_config(&self, proposal: ProposalKind) -> Result<SmcConfig> {
        let mut c = SmcConfig::new(self.particles, self.steps, proposal);
        c.kl_weight = self.alpha;
        c.noise = self.noise;
        c.temper = self.temper_schedule()?;
        c.resample = ResampleScheme {
            kind: self.resample,
            ess_min: self.ess_min.unwrap_or(self.particles as f64 / 2.0),
        };
        c.gumbel = self.gumbel;
        c.workers = self.workers;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.proposals.is_empty() {
            return Err(Error::Config("proposal list is empty".into()));
        }
        self.smc_config(self.proposal).map(|_| ())
    }

    /// The model in the vocabulary of the configured family.
    pub fn build_model(&self) -> Result<TabularModel> {
        let model = match &self.model {
            ModelSource::Gmm(spec) => build_gmm_table(spec)?,
            ModelSource::File(path) => TabularModel::load(path)?,
        };
        let vocab = self.family.vocab(model.data_size())?;
        if *model.vocab() == vocab {
            Ok(model)
        } else {
            model.with_vocab(vocab)
        }
    }

    pub fn build_reward(&self, model: &TabularModel) -> Result<LinearReward> {
        let vocab = model.vocab();
        let two_d = || {
            if model.length() == 2 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "grid rewards need sequence length 2, model has {}",
                    model.length()
                )))
            }
        };
        match &self.reward {
            RewardSpec::Preset(p) => {
                two_d()?;
                p.build(vocab)
            }
            RewardSpec::Custom { weights, offsets } => {
                two_d()?;
                gmm_reward(vocab, *weights, *offsets)
            }
            RewardSpec::None => LinearReward::constant_reward(0.0, model.length(), vocab.size_total()),
        }
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| parse_error(line, format!("`{key}`: cannot parse `{raw}`")))
}

fn reals<const N: usize>(line: usize, key: &str, raw: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = raw.split_whitespace().collect();
    if parts.len() != N {
        return Err(parse_error(line, format!("`{key}` expects {N} numbers, got {}", parts.len())));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = value(line, key, p)?;
        if !o.is_finite() {
            return Err(parse_error(line, format!("`{key}`: {p} is not finite")));
        }
    }
    Ok(out)
}

fn check(line: usize, ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(parse_error(line, message()))
    }
}

/// Parse configuration text. Relative `model_file` paths resolve against
/// `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(0, 0);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut components: Vec<GmmComponent> = Vec::new();
    let mut grid_size = 64usize;
    let mut model_file: Option<PathBuf> = None;
    let mut reward_kind = "top".to_string();
    let mut reward_weights: Option<(f64, f64)> = None;
    let mut reward_offsets: Option<(f64, f64)> = None;
    let mut eta_cap = DEFAULT_ETA_CAP;
    let mut family_name = "masked".to_string();

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| parse_error(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key != "component" {
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(parse_error(line, format!("`{key}` already set on line {prev}")));
            }
        }
        match key {
            "particles" => {
                cfg.particles = value(line, key, raw)?;
                check(line, cfg.particles >= 1, || "particles must be >= 1".into())?;
            }
            "steps" => {
                cfg.steps = value(line, key, raw)?;
                check(line, cfg.steps >= 1, || "steps must be >= 1".into())?;
            }
            "family" => {
                check(line, matches!(raw, "masked" | "remdm" | "udlm"), || {
                    format!("unknown family `{raw}` (expected masked, remdm or udlm)")
                })?;
                family_name = raw.to_string();
            }
            "eta_cap" => {
                eta_cap = value(line, key, raw)?;
                check(line, (0.0..=1.0).contains(&eta_cap), || format!("eta_cap {eta_cap} outside [0, 1]"))?;
            }
            "proposal" => {
                cfg.proposal = raw.parse().map_err(|e: Error| parse_error(line, e.to_string()))?;
            }
            "proposals" => {
                cfg.proposals = raw
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|e: Error| parse_error(line, e.to_string())))
                    .collect::<Result<_>>()?;
            }
            "alpha" => {
                cfg.alpha = value(line, key, raw)?;
                check(line, cfg.alpha > 0.0 && cfg.alpha.is_finite(), || {
                    format!("alpha must be > 0, got {raw}")
                })?;
            }
            "temper" => {
                cfg.temper = match raw {
                    "linear" => TemperKind::Linear,
                    "exp_capped" => TemperKind::ExpCapped,
                    "zero" => TemperKind::Zero,
                    _ => {
                        return Err(parse_error(
                            line,
                            format!("unknown temper schedule `{raw}` (expected linear, exp_capped or zero)"),
                        ))
                    }
                };
            }
            "temper_base" => {
                cfg.temper_base = value(line, key, raw)?;
                check(line, cfg.temper_base > 1.0 && cfg.temper_base.is_finite(), || {
                    format!("temper_base must be > 1, got {raw}")
                })?;
            }
            "temper_steps" => {
                let s: usize = value(line, key, raw)?;
                check(line, s >= 1, || "temper_steps must be >= 1".into())?;
                cfg.temper_steps = Some(s);
            }
            "noise" => {
                check(line, raw == "linear", || format!("unknown noise schedule `{raw}` (expected linear)"))?;
                cfg.noise = NoiseSchedule::Linear;
            }
            "ess_min" => {
                let e: f64 = value(line, key, raw)?;
                check(line, e >= 1.0 && e.is_finite(), || format!("ess_min must be >= 1, got {raw}"))?;
                cfg.ess_min = Some(e);
            }
            "resample" => {
                cfg.resample = raw.parse().map_err(|e: Error| parse_error(line, e.to_string()))?;
            }
            "gumbel_tau" => {
                cfg.gumbel.tau = value(line, key, raw)?;
                check(line, cfg.gumbel.tau > 0.0 && cfg.gumbel.tau.is_finite(), || {
                    format!("gumbel_tau must be > 0, got {raw}")
                })?;
            }
            "gumbel_samples" => {
                cfg.gumbel.samples = value(line, key, raw)?;
                check(line, cfg.gumbel.samples >= 1, || "gumbel_samples must be >= 1".into())?;
            }
            "seed" => cfg.seed = value(line, key, raw)?,
            "workers" => cfg.workers = value(line, key, raw)?,
            "model_file" => {
                check(line, !raw.is_empty(), || "model_file is empty".into())?;
                model_file = Some(base_dir.join(raw));
            }
            "grid_size" => {
                grid_size = value(line, key, raw)?;
                check(line, grid_size >= 2, || "grid_size must be >= 2".into())?;
            }
            "component" => {
                let [mx, my, cxx, cxy, cyy, w] = reals::<6>(line, key, raw)?;
                let c = GmmComponent {
                    mean: [mx, my],
                    cov: [[cxx, cxy], [cxy, cyy]],
                    weight: w,
                };
                GmmSpec {
                    components: vec![c.clone()],
                    grid_size: 2,
                }
                .validate()
                .map_err(|e| parse_error(line, e.to_string()))?;
                components.push(c);
            }
            "reward" => {
                check(line, matches!(raw, "top" | "bottom" | "custom" | "none"), || {
                    format!("unknown reward `{raw}` (expected top, bottom, custom or none)")
                })?;
                reward_kind = raw.to_string();
            }
            "reward_weights" => {
                let [a, b] = reals::<2>(line, key, raw)?;
                reward_weights = Some((a, b));
            }
            "reward_offsets" => {
                let [a, b] = reals::<2>(line, key, raw)?;
                reward_offsets = Some((a, b));
            }
            "out" => {
                check(line, !raw.is_empty(), || "out is empty".into())?;
                cfg.out = PathBuf::from(raw);
            }
            _ => return Err(parse_error(line, format!("unknown key `{key}`"))),
        }
    }

    let missing: Vec<&str> = ["particles", "steps"]
        .into_iter()
        .filter(|k| !seen.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
    }
    if let Some(e) = cfg.ess_min {
        let line = seen["ess_min"];
        check(line, e <= cfg.particles as f64, || {
            format!("ess_min {e} exceeds the particle count {}", cfg.particles)
        })?;
    }
    if cfg.resample == ResampleKind::PartialSystematic && cfg.particles < 2 {
        return Err(parse_error(seen["resample"], "partial resampling needs at least 2 particles"));
    }
    if cfg.temper == TemperKind::ExpCapped {
        cfg.temper_schedule().map_err(|e| parse_error(seen["temper"], e.to_string()))?;
    }

    cfg.family = match family_name.as_str() {
        "remdm" => ModelFamily::Remdm { eta_cap },
        "udlm" => ModelFamily::Udlm,
        _ => ModelFamily::Masked,
    };
    if seen.contains_key("eta_cap") && !matches!(cfg.family, ModelFamily::Remdm { .. }) {
        return Err(parse_error(seen["eta_cap"], "eta_cap only applies to family = remdm"));
    }

    cfg.model = match model_file {
        Some(path) => {
            if let Some(&l) = seen.get("grid_size").or(seen.get("component")) {
                return Err(parse_error(l, "model_file cannot be combined with mixture keys"));
            }
            if !components.is_empty() {
                return Err(Error::Config("model_file cannot be combined with component lines".into()));
            }
            ModelSource::File(path)
        }
        None => {
            let mut spec = GmmSpec {
                grid_size,
                ..GmmSpec::default()
            };
            if !components.is_empty() {
                spec.components = components;
            }
            ModelSource::Gmm(spec)
        }
    };

    cfg.reward = match reward_kind.as_str() {
        "bottom" => RewardSpec::Preset(GridRewardPreset::Bottom),
        "none" => RewardSpec::None,
        "custom" => RewardSpec::Custom {
            weights: reward_weights
                .ok_or_else(|| Error::Config("reward = custom needs reward_weights".into()))?,
            offsets: reward_offsets.unwrap_or((0.0, 0.0)),
        },
        _ => RewardSpec::Preset(GridRewardPreset::Top),
    };
    if reward_kind != "custom" {
        for k in ["reward_weights", "reward_offsets"] {
            if let Some(&l) = seen.get(k) {
                return Err(parse_error(l, format!("`{k}` only applies to reward = custom")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Input(_) => 2,
        Error::Numeric(_) | Error::Degenerate(_) | Error::Domain(_) => 3,
        Error::Guard(_) => 4,
        Error::Io(_) => 1,
    }
}

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_file(kind: &str, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("# ddsmc {kind} v{FORMAT_VERSION}\n{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

pub fn samples_csv(particles: &ParticleSet, model: &TabularModel) -> Result<String> {
    let vocab = model.vocab();
    let w = particles.weights()?;
    let cols: Vec<String> = (0..model.length()).map(|l| format!("x{l}")).collect();
    let header = format!("particle,{},log_weight,weight", cols.join(","));
    let rows = particles
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let toks: Vec<String> = s
                .iter()
                .map(|&t| vocab.data_index(t).map_or("mask".to_string(), |d| d.to_string()))
                .collect();
            format!("{i},{},{},{}", toks.join(","), particles.log_weights[i], w[i])
        })
        .collect::<Vec<_>>();
    Ok(csv_file("samples", &header, rows))
}

pub fn trace_csv(traces: &[StepTrace]) -> String {
    csv_file("trace", StepTrace::CSV_HEADER, traces.iter().map(StepTrace::csv_row))
}

pub fn metrics_csv(report: &MetricReport) -> String {
    csv_file("metrics", MetricReport::CSV_HEADER, [report.csv_row()])
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub proposal: ProposalKind,
    pub metrics: MetricReport,
    pub resamples: usize,
    pub log_normalizer: f64,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "proposal={} mean_reward={:.6} emd={:.6} diversity={} samples={} resamples={} log_Z={:.6}",
            self.proposal,
            self.metrics.mean_reward,
            self.metrics.emd,
            self.metrics.diversity,
            self.metrics.sample_count,
            self.resamples,
            self.log_normalizer
        )
    }
}

struct Prepared {
    model: TabularModel,
    reward: LinearReward,
    target: crate::eval::GridDistribution,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let reward = cfg.build_reward(&model)?;
    let target = enumerate_target(&model, &reward, cfg.alpha)?;
    Ok(Prepared { model, reward, target })
}

fn run_one(cfg: &RunConfig, p: &Prepared, proposal: ProposalKind) -> Result<(SmcOutput, RunSummary)> {
    let out = run_smc(&cfg.smc_config(proposal)?, &p.model, cfg.family, &p.reward, cfg.seed)?;
    let report = metrics(&out.particles, &p.model, &p.reward, &p.target)?;
    let summary = RunSummary {
        proposal,
        metrics: report,
        resamples: out.resample_count(),
        log_normalizer: out.log_normalizer,
    };
    Ok((out, summary))
}

/// Run the configured proposal and write all outputs into `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    let p = prepare(cfg)?;
    let (out, summary) = run_one(cfg, &p, cfg.proposal)?;
    let dir = &cfg.out;
    // images need a 1D or 2D table; check before writing anything
    let images = if p.model.length() <= 2 {
        let density = empirical_distribution(&out.particles, &p.model)?;
        Some((density.to_pgm()?, p.target.to_pgm()?))
    } else {
        None
    };
    write_atomic(&dir.join("samples.csv"), samples_csv(&out.particles, &p.model)?.as_bytes())?;
    write_atomic(&dir.join("trace.csv"), trace_csv(&out.traces).as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&summary.metrics).as_bytes())?;
    if let Some((density, target)) = images {
        write_atomic(&dir.join("density.pgm"), &density)?;
        write_atomic(&dir.join("target.pgm"), &target)?;
    }
    Ok(summary)
}

pub const COMPARISON_HEADER: &str = "proposal,mean_reward,emd,diversity,sample_count,resamples,log_normalizer";

/// Run every configured proposal from the same master seed; writes
/// `comparison.csv` and one `trace_<proposal>.csv` per proposal.
pub fn compare_proposals(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    let p = prepare(cfg)?;
    let mut results = Vec::with_capacity(cfg.proposals.len());
    for &kind in &cfg.proposals {
        results.push(run_one(cfg, &p, kind)?);
    }
    let rows = results.iter().map(|(_, s)| {
        format!(
            "{},{},{},{}",
            s.proposal,
            s.metrics.csv_row(),
            s.resamples,
            s.log_normalizer
        )
    });
    write_atomic(
        &cfg.out.join("comparison.csv"),
        csv_file("comparison", COMPARISON_HEADER, rows).as_bytes(),
    )?;
    for (out, s) in &results {
        write_atomic(
            &cfg.out.join(format!("trace_{}.csv", s.proposal)),
            trace_csv(&out.traces).as_bytes(),
        )?;
    }
    Ok(results.into_iter().map(|(_, s)| s).collect())
}

/// The tilted target table as CSV: data coordinates and probability.
pub fn target_table(cfg: &RunConfig) -> Result<String> {
    let p = prepare(cfg)?;
    let cols: Vec<String> = (0..p.model.length()).map(|l| format!("x{l}")).collect();
    let header = format!("{},prob", cols.join(","));
    let rows = p.target.probs().iter().enumerate().map(|(i, prob)| {
        let d: Vec<String> = p.target.digits(i).iter().map(|x| x.to_string()).collect();
        format!("{},{prob}", d.join(","))
    });
    Ok(csv_file("target", &header, rows))
}
