//! Phase-shifted sinusoids with additive Gaussian noise.
//!
//! Draw order for a given seed: for every series `i = 0..n` in turn a wave
//! choice (`gen_bool(0.5)`, `true` = cosine), then `t0 ~ U[t0_min, t0_max]`,
//! then `omega ~ U[omega_min, omega_max]`; after all series, the noise
//! `eps ~ N(0,1)` for series 0 steps `0..T`, then series 1, and so on.
//! Noise is always drawn, even when `lambda = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MultivariateSeries;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveChoice {
    #[default]
    Random,
    Sin,
    Cos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub len: usize,
    pub t0_min: f64,
    pub t0_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub lambda: f64,
    pub seed: u64,
    pub wave: WaveChoice,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 30,
            len: 20_000,
            t0_min: 50.0,
            t0_max: 100.0,
            omega_min: 40.0,
            omega_max: 50.0,
            lambda: 0.3,
            seed: 0,
            wave: WaveChoice::Random,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.len == 0 {
            return Err(Error::Config(format!(
                "need n >= 2 and T >= 1, got n={} T={}",
                self.n, self.len
            )));
        }
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.t0_min, self.t0_max) {
            return Err(Error::Config(
                "t0 range must satisfy t0_min <= t0_max".into(),
            ));
        }
        if !ok(self.omega_min, self.omega_max) || self.omega_min <= 0.0 {
            return Err(Error::Config(
                "omega range must be positive with omega_min <= omega_max".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<MultivariateSeries> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let waves: Vec<(bool, f64, f64)> = (0..cfg.n)
        .map(|_| {
            let cosine = rng.gen_bool(0.5);
            let t0 = draw(&mut rng, cfg.t0_min, cfg.t0_max);
            let omega = draw(&mut rng, cfg.omega_min, cfg.omega_max);
            let cosine = match cfg.wave {
                WaveChoice::Random => cosine,
                WaveChoice::Sin => false,
                WaveChoice::Cos => true,
            };
            (cosine, t0, omega)
        })
        .collect();
    let rows = waves
        .iter()
        .map(|&(cosine, t0, omega)| {
            (0..cfg.len)
                .map(|t| {
                    let phase = (t as f64 - t0) / omega;
                    let eps: f64 = rng.sample(StandardNormal);
                    let base = if cosine { phase.cos() } else { phase.sin() };
                    base + cfg.lambda * eps
                })
                .collect()
        })
        .collect();
    MultivariateSeries::from_rows(rows)
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}
