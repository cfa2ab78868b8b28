//! Gradient clipping with Gaussian noise, and the linearly decaying noise
//! multiplier.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_threshold: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub total_rounds: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return Err(Error::InvalidConfig("clip threshold must be positive".into()));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidConfig("need sigma_max >= sigma_min >= 0".into()));
        }
        if self.total_rounds == 0 {
            return Err(Error::InvalidConfig("total_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, C/‖g‖₂)`. The result's norm never exceeds `clip`,
/// including after rounding.
pub fn clip_to_norm(g: &[f64], clip: f64) -> Result<Vec<f64>> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGradient);
    }
    let norm = l2_norm(g);
    if norm <= clip {
        return Ok(g.to_vec());
    }
    let mut factor = clip / norm;
    loop {
        let out: Vec<f64> = g.iter().map(|v| v * factor).collect();
        if l2_norm(&out) <= clip {
            return Ok(out);
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// `g·min(1, C/‖g‖₂) + N(0, σ²C²)` with i.i.d. noise per coordinate. With
/// `σ = 0` no noise term is added at all.
pub fn clip_and_noise<R: Rng + ?Sized>(g: &[f64], clip: f64, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidConfig("need C > 0 and sigma >= 0".into()));
    }
    let mut out = clip_to_norm(g, clip)?;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma * clip).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Ok(out)
}

/// Noise multiplier for round `t`, decreasing linearly from `sigma_max` at
/// `t = 0` to `sigma_min` at `t = T − 1`.
pub fn sigma_at(round: u64, cfg: &DpConfig) -> Result<f64> {
    if round >= cfg.total_rounds {
        return Err(Error::Schedule {
            round,
            total: cfg.total_rounds,
        });
    }
    if cfg.total_rounds == 1 {
        return Ok(cfg.sigma_min);
    }
    if round == cfg.total_rounds - 1 {
        return Ok(cfg.sigma_min);
    }
    let frac = round as f64 / (cfg.total_rounds - 1) as f64;
    Ok(cfg.sigma_max - (cfg.sigma_max - cfg.sigma_min) * frac)
}

/// Like [`sigma_at`] but holds `sigma_min` once the schedule is exhausted.
pub fn sigma_clamped(round: u64, cfg: &DpConfig) -> f64 {
    sigma_at(round.min(cfg.total_rounds - 1), cfg).expect("clamped round is in range")
}

/// Relative leakage indicator `Σ_t 1/σ(t)²` over executed rounds (rounds past
/// the schedule use `sigma_min`). Infinite once a noiseless round has run.
pub fn budget_spent(rounds_executed: u64, cfg: &DpConfig) -> f64 {
    (0..rounds_executed)
        .map(|t| {
            let s = sigma_clamped(t, cfg);
            1.0 / (s * s)
        })
        .sum()
}
