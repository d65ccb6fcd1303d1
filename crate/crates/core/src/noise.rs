//! Ornstein-Uhlenbeck exploration noise with a linearly annealed scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the annealed `sigma` enters the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuScale {
    /// `sigma` is the stationary standard deviation of the discrete process.
    StationaryStd,
    /// `sigma` multiplies `sqrt(dt) N(0, 1)` directly.
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuConfig {
    pub theta: f64,
    pub mu0: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub anneal_steps: u64,
    pub dt: f64,
    pub scale: OuScale,
}

impl Default for OuConfig {
    fn default() -> Self {
        OuConfig {
            theta: 0.15,
            mu0: 0.0,
            sigma_start: 0.35,
            sigma_end: 0.05,
            anneal_steps: 50_000,
            dt: 1.0,
            scale: OuScale::StationaryStd,
        }
    }
}

impl OuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::config("ou.theta", "theta must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("ou.dt", "dt must be positive"));
        }
        if self.scale == OuScale::StationaryStd && self.theta * self.dt >= 2.0 {
            return Err(Error::config("ou.theta", "theta * dt must be < 2 for a stationary process"));
        }
        if !(self.sigma_end >= 0.0 && self.sigma_start >= self.sigma_end) {
            return Err(Error::config(
                "ou.sigma_start",
                "require sigma_start >= sigma_end >= 0",
            ));
        }
        Ok(())
    }

    /// Scale at global step `t`: linear from `sigma_start` to `sigma_end`
    /// over `anneal_steps`, constant afterwards.
    pub fn sigma_at(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.sigma_end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }

    /// Coefficient of `N(0, 1)` in one update for scale `sigma`.
    pub fn diffusion(&self, sigma: f64) -> f64 {
        match self.scale {
            OuScale::Diffusion => sigma * self.dt.sqrt(),
            OuScale::StationaryStd => {
                let phi = 1.0 - self.theta * self.dt;
                sigma * (1.0 - phi * phi).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuNoise {
    pub cfg: OuConfig,
    x: Vec<f64>,
    /// Replaces the annealed scale when set.
    pub sigma_override: Option<f64>,
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(cfg: OuConfig, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(OuNoise {
            x: vec![cfg.mu0; dim],
            cfg,
            sigma_override: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn anneal_sigma(&self, t: u64) -> f64 {
        self.sigma_override.unwrap_or_else(|| self.cfg.sigma_at(t))
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn set_state(&mut self, x: &[f64]) {
        self.x.copy_from_slice(x);
    }

    /// Returns the process to its long-run mean.
    pub fn reset(&mut self) {
        self.x.fill(self.cfg.mu0);
    }

    /// Advances the process one step and returns the new value.
    pub fn sample(&mut self, t: u64) -> &[f64] {
        let sigma = self.anneal_sigma(t);
        let diffusion = self.cfg.diffusion(sigma);
        let OuConfig { theta, mu0, dt, .. } = self.cfg;
        for x in &mut self.x {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *x += theta * (mu0 - *x) * dt + diffusion * n;
        }
        &self.x
    }
}

/// `clamp(action + noise, 0, 1)` componentwise.
pub fn apply_noise(action: &[f64], noise: &[f64]) -> Vec<f64> {
    action
        .iter()
        .zip(noise)
        .map(|(a, n)| (a + n).clamp(0.0, 1.0))
        .collect()
}
