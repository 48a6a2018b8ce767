//! Linear β schedule and the derived α, ᾱ and σ tables.
//!
//! Internally timesteps run `0..T`; index `t` corresponds to step `t + 1`
//! of the usual 1-based notation. Tables are kept in f64 and cast at use.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    /// Reverse-step noise scale, `sqrt(beta)`.
    pub sigma: f64,
}

pub const DEFAULT_TIMESTEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidRange("timesteps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps).map(|t| beta_start + (t as f64 / (timesteps - 1) as f64) * (beta_end - beta_start)).collect()
        };
        Ok(Self::from_betas(beta))
    }

    /// Arbitrary β table; callers guarantee `0 < β < 1`.
    pub(crate) fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self { beta, alpha, alpha_bar, sigma }
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn lookup(&self, t: usize) -> Result<ScheduleEntry> {
        if t >= self.timesteps() {
            return Err(Error::TimestepOutOfRange { t, timesteps: self.timesteps() });
        }
        Ok(ScheduleEntry {
            beta: self.beta[t],
            alpha: self.alpha[t],
            alpha_bar: self.alpha_bar[t],
            sigma: self.sigma[t],
        })
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}
