//! Cosine noise schedule, SNR-scaled forward sampling and the DDIM reverse
//! update, all over normalized residuals.

use serde::{Deserialize, Serialize};

use crate::boxes::NormalizedResidual7;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub cosine_s: f64,
    pub snr: f64,
    pub clamp_bound: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 1000,
            cosine_s: 0.008,
            snr: 2.0,
            clamp_bound: 3.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Config("diffusion.timesteps must be >= 1".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config("diffusion.snr must be > 0".into()));
        }
        if !(self.clamp_bound > 0.0) {
            return Err(Error::Config("diffusion.clamp_bound must be > 0".into()));
        }
        if !(self.cosine_s > 0.0) {
            return Err(Error::Config("diffusion.cosine_s must be > 0".into()));
        }
        Ok(())
    }
}

const MAX_BETA: f64 = 0.999;

/// Precomputed `beta`, `alpha` and cumulative `alpha_bar` tables indexed by
/// `t = 0..=T`. `beta[0]` is 0 and `alpha_bar[0]` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar[t] = f(t) / f(0)` with
    /// `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`.
    pub fn cosine(timesteps: usize, s: f64) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(s > 0.0) {
            return Err(Error::Config("cosine offset must be positive".into()));
        }
        let f = |t: usize| {
            let v = ((t as f64 / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos();
            v * v
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=timesteps).map(|t| f(t) / f0).collect();
        Ok(Self::from_alpha_bar(alpha_bar))
    }

    /// Builds the derived tables from an explicit cumulative product table.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Self {
        let timesteps = alpha_bar.len() - 1;
        let mut beta = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            beta[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(MAX_BETA);
        }
        let alpha = beta.iter().map(|b| 1.0 - b).collect();
        NoiseSchedule {
            timesteps,
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        Self::cosine(cfg.timesteps, cfg.cosine_s)
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.timesteps {
            Err(Error::Timestep {
                t,
                max: self.timesteps,
            })
        } else {
            Ok(())
        }
    }
}

/// Forward sample before clamping.
pub fn q_sample_unclamped(
    x0: &NormalizedResidual7,
    t: usize,
    eps: &[f64; 7],
    schedule: &NoiseSchedule,
    snr: f64,
) -> Result<NormalizedResidual7> {
    schedule.check(t, 1)?;
    let ab = schedule.alpha_bar[t];
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt() / snr;
    Ok(NormalizedResidual7(std::array::from_fn(|i| {
        signal * x0[i] + noise * eps[i]
    })))
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps / snr`, clamped componentwise.
pub fn q_sample(
    x0: &NormalizedResidual7,
    t: usize,
    eps: &[f64; 7],
    schedule: &NoiseSchedule,
    cfg: &DiffusionConfig,
) -> Result<NormalizedResidual7> {
    Ok(q_sample_unclamped(x0, t, eps, schedule, cfg.snr)?.clamp(cfg.clamp_bound))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimStep {
    pub next: NormalizedResidual7,
    pub sigma: f64,
    /// Set when `1 − ᾱ_prev − σ²` went negative and was clamped to zero.
    pub clamped: bool,
}

/// One reverse update from `t` to `t_prev` given the predicted clean sample.
pub fn ddim_step(
    x_t: &NormalizedResidual7,
    x0_hat: &NormalizedResidual7,
    t: usize,
    t_prev: usize,
    eps_new: &[f64; 7],
    schedule: &NoiseSchedule,
) -> Result<DdimStep> {
    schedule.check(t, 1)?;
    schedule.check(t_prev, 0)?;
    if t_prev >= t {
        return Err(Error::Config(format!(
            "ddim step needs t_prev < t, got t={t} t_prev={t_prev}"
        )));
    }
    let ab_t = schedule.alpha_bar[t];
    let ab_prev = schedule.alpha_bar[t_prev];
    let sqrt_one_minus = (1.0 - ab_t).sqrt();
    let sigma = (((1.0 - ab_prev) / (1.0 - ab_t)).max(0.0)).sqrt()
        * ((1.0 - ab_t / ab_prev).max(0.0)).sqrt();
    let mut dir_sq = 1.0 - ab_prev - sigma * sigma;
    let clamped = dir_sq < 0.0;
    if clamped {
        dir_sq = 0.0;
    }
    let dir = dir_sq.sqrt();
    let signal = ab_prev.sqrt();
    let sqrt_ab_t = ab_t.sqrt();
    let next = NormalizedResidual7(std::array::from_fn(|i| {
        let eps_pred = if sqrt_one_minus > 0.0 {
            (x_t[i] - sqrt_ab_t * x0_hat[i]) / sqrt_one_minus
        } else {
            0.0
        };
        x0_hat[i] * signal + eps_pred * dir + sigma * eps_new[i]
    }));
    Ok(DdimStep {
        next,
        sigma,
        clamped,
    })
}

/// Reverse-process timesteps, strictly decreasing. The final update always
/// targets `t_prev = 0`.
pub fn make_timestep_sequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > timesteps {
        return Err(Error::Config(format!(
            "sampling steps must be in 1..={timesteps}, got {steps}"
        )));
    }
    if steps == 3 && timesteps == 1000 {
        return Ok(vec![1000, 500, 200]);
    }
    let seq: Vec<usize> = (0..steps)
        .map(|k| (timesteps as f64 * (1.0 - k as f64 / steps as f64)).round() as usize)
        .collect();
    Ok(seq)
}

/// `(t, t_prev)` pairs for a timestep sequence.
pub fn step_pairs(seq: &[usize]) -> Vec<(usize, usize)> {
    seq.iter()
        .enumerate()
        .map(|(i, &t)| (t, seq.get(i + 1).copied().unwrap_or(0)))
        .collect()
}
