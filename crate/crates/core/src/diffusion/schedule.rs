use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal fractions `alpha_bar[t - 1]` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Default training length.
    pub const DEFAULT_T: usize = 50;
    /// Linear beta endpoints of the usual 1000-step schedule, rescaled by
    /// `1000 / 50` so that 50 steps reach (almost) pure noise.
    pub const DEFAULT_BETA_START: f64 = 0.002;
    pub const DEFAULT_BETA_END: f64 = 0.4;

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!("invalid beta range [{beta_start}, {beta_end}]")));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validates an explicit `alpha_bar` sequence.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if !(alpha_bar[0] <= 1.0 && *alpha_bar.last().unwrap() > 0.0) {
            return Err(Error::Config("alpha_bar must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Per-step `alpha_t = alpha_bar_t / alpha_bar_{t-1}`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar_at(t) / self.alpha_bar_at(t - 1)
    }

    /// Signal-to-noise ratio `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar_at(t);
        a / (1.0 - a)
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `count` timesteps spread evenly over `1..=T`, ascending, always ending at `T`.
    pub fn subsequence(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::Config(format!("sampling steps {count} must be in 1..={t}")));
        }
        Ok((1..=count).map(|i| (i * t).div_ceil(count)).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_T, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noising(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Validation("x0 and eps differ in dimension".into()));
    }
    let a = sched.alpha_bar_at(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
}
