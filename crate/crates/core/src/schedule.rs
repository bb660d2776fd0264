//! Noise and tempering schedules on the uniform time grid `t = τ/T`.

use crate::error::{Error, Result};

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Noise schedule `α_t`, decreasing from 1 at `t = 0` to 0 at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSchedule {
    #[default]
    Linear,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> Result<f64> {
        noise_alpha(*self, t)
    }
}

pub fn noise_alpha(schedule: NoiseSchedule, t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(match schedule {
        NoiseSchedule::Linear => 1.0 - t,
    })
}

/// Tempering schedule `λ_t`, rising from 0 at `t = 1` to 1 at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TemperSchedule {
    /// `λ_t = 1 - t`.
    #[default]
    Linear,
    /// `λ_t = min(base^{steps (1 - t)} - 1, 1)`.
    ExpCapped { base: f64, steps: usize },
    /// `λ_t = 0` everywhere: the untilted model.
    Zero,
}

impl TemperSchedule {
    pub fn exp_capped(base: f64, steps: usize) -> Result<Self> {
        let s = Self::ExpCapped { base, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::ExpCapped { base, steps } = *self {
            if !(base > 1.0 && base.is_finite()) {
                return Err(Error::Config(format!(
                    "exp_capped tempering needs base > 1, got {base}"
                )));
            }
            if steps == 0 {
                return Err(Error::Config("exp_capped tempering needs steps >= 1".into()));
            }
            // λ_0 = 1 requires base^steps - 1 to reach the cap
            if base.powf(steps as f64) < 2.0 {
                return Err(Error::Config(format!(
                    "exp_capped tempering with base {base} never reaches 1 in {steps} steps"
                )));
            }
        }
        Ok(())
    }

    pub fn lambda(&self, t: f64) -> Result<f64> {
        temper_lambda(*self, t)
    }
}

pub fn temper_lambda(schedule: TemperSchedule, t: f64) -> Result<f64> {
    check_time(t)?;
    schedule.validate()?;
    Ok(match schedule {
        TemperSchedule::Linear => 1.0 - t,
        TemperSchedule::ExpCapped { base, steps } => {
            (base.powf(steps as f64 * (1.0 - t)) - 1.0).min(1.0)
        }
        TemperSchedule::Zero => 0.0,
    })
}

/// One reverse step `t = τ/T → s = (τ-1)/T` with its schedule values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPair {
    pub tau: usize,
    pub s: f64,
    pub t: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
}

/// Step pairs for τ = T, T-1, ..., 1.
pub fn reverse_steps(
    steps: usize,
    noise: NoiseSchedule,
    temper: TemperSchedule,
) -> Result<Vec<StepPair>> {
    if steps == 0 {
        return Err(Error::Config("need at least one time step".into()));
    }
    let n = steps as f64;
    (1..=steps)
        .rev()
        .map(|tau| {
            let t = tau as f64 / n;
            let s = (tau - 1) as f64 / n;
            Ok(StepPair {
                tau,
                s,
                t,
                alpha_s: noise.alpha(s)?,
                alpha_t: noise.alpha(t)?,
                lambda_s: temper.lambda(s)?,
                lambda_t: temper.lambda(t)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_noise_values() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(-0.1).is_err());
    }

    #[test]
    fn exp_capped_values() {
        let s = TemperSchedule::exp_capped(1.05, 100).unwrap();
        assert_eq!(s.lambda(1.0).unwrap(), 0.0);
        assert_eq!(s.lambda(0.5).unwrap(), 1.0);
        assert_eq!(s.lambda(0.0).unwrap(), 1.0);
        // 1.05^5 - 1 below the cap
        let v = s.lambda(0.95).unwrap();
        assert!((v - (1.05f64.powi(5) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_temper_boundaries() {
        assert_eq!(TemperSchedule::Linear.lambda(0.0).unwrap(), 1.0);
        assert_eq!(TemperSchedule::Linear.lambda(1.0).unwrap(), 0.0);
    }

    #[test]
    fn exp_capped_rejects_small_base() {
        assert!(TemperSchedule::exp_capped(1.0, 100).is_err());
        assert!(TemperSchedule::exp_capped(0.5, 100).is_err());
        assert!(TemperSchedule::exp_capped(1.05, 10).is_err());
        let bad = TemperSchedule::ExpCapped { base: 0.9, steps: 10 };
        assert!(matches!(temper_lambda(bad, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn reverse_steps_grid() {
        let steps = reverse_steps(4, NoiseSchedule::Linear, TemperSchedule::Linear).unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[0].tau, 4);
        assert_eq!(steps[0].t, 1.0);
        assert_eq!(steps[0].s, 0.75);
        assert_eq!(steps[3].s, 0.0);
        assert_eq!(steps[3].lambda_s, 1.0);
    }

    proptest! {
        #[test]
        fn temper_monotone_on_grid(base in 1.001f64..1.5, steps in 1usize..200) {
            prop_assume!(base.powf(steps as f64) >= 2.0);
            for sched in [TemperSchedule::Linear, TemperSchedule::ExpCapped { base, steps }] {
                let grid: Vec<f64> = (0..=steps)
                    .map(|tau| sched.lambda(tau as f64 / steps as f64).unwrap())
                    .collect();
                prop_assert_eq!(grid[steps], 0.0);
                prop_assert_eq!(grid[0], 1.0);
                for w in grid.windows(2) {
                    // non-decreasing as τ decreases
                    prop_assert!(w[0] >= w[1]);
                }
            }
        }
    }
}
