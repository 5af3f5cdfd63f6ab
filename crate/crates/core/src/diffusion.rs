//! Discrete noise schedule and DDIM updates.
//!
//! Timesteps are 1-based, `t ∈ [1, T]`; `alpha_bar(0)` is defined as 1 so
//! that the final step lands on the clean estimate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` inclusive over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }

    /// Decreasing timestep subsequence of length `steps`, stride ⌊T/S⌋, ending at 1.
    pub fn subsequence(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps == 0 || steps > t {
            return Err(Error::invalid(format!("sampling steps {steps} outside [1, {t}]")));
        }
        let stride = t / steps;
        Ok((0..steps).rev().map(|j| 1 + j * stride).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaRule {
    /// σ = η √((1-ᾱ_prev)/(1-ᾱ_t)) √(1-ᾱ_t/ᾱ_prev)
    Standard,
    /// σ = η √(1-ᾱ_prev)
    Dds,
}

impl FromStr for SigmaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" | "ddim" => Ok(SigmaRule::Standard),
            "dds" => Ok(SigmaRule::Dds),
            other => Err(Error::invalid(format!("unknown sigma rule '{other}'"))),
        }
    }
}

impl fmt::Display for SigmaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaRule::Standard => "standard",
            SigmaRule::Dds => "dds",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimParams {
    pub eta: f64,
    pub sigma_rule: SigmaRule,
}

impl DdimParams {
    pub fn new(eta: f64, sigma_rule: SigmaRule) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(DdimParams { eta, sigma_rule })
    }
}

/// x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε
pub fn forward_noise(x0: &Volume, t: usize, eps: &Volume, schedule: &NoiseSchedule) -> Result<Volume> {
    schedule.check_t(t)?;
    same_dims(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// x̂ = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t
pub fn denoised_estimate(x_t: &Volume, eps_hat: &Volume, t: usize, schedule: &NoiseSchedule) -> Result<Volume> {
    schedule.check_t(t)?;
    same_dims(x_t, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::invalid("alpha_bar is zero; denoised estimate undefined"));
    }
    let s = (1.0 - ab).sqrt();
    let inv = 1.0 / ab.sqrt();
    Volume::from_vec(
        x_t.dims(),
        x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - s * e) * inv).collect(),
    )
}

pub fn sigma_t(params: &DdimParams, schedule: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    match params.sigma_rule {
        SigmaRule::Dds => params.eta * (1.0 - ab_prev).sqrt(),
        SigmaRule::Standard => {
            if ab >= 1.0 {
                return 0.0;
            }
            let ratio = ((1.0 - ab_prev) / (1.0 - ab)).max(0.0);
            let tail = (1.0 - ab / ab_prev).max(0.0);
            params.eta * ratio.sqrt() * tail.sqrt()
        }
    }
}

/// One DDIM update from `t` to `t_prev`:
/// `x_prev = √ᾱ_prev x̂ + √(1-ᾱ_prev-σ²) ε̂ + σ ε_fresh`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_hat: &Volume,
    eps_hat: &Volume,
    eps_fresh: &Volume,
    t: usize,
    t_prev: usize,
    params: &DdimParams,
    schedule: &NoiseSchedule,
) -> Result<Volume> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("t_prev {t_prev} must precede t {t}")));
    }
    same_dims(x_hat, eps_hat)?;
    same_dims(x_hat, eps_fresh)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = sigma_t(params, schedule, t, t_prev);
    let mut radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < 0.0 {
        // rounding only: σ² can exceed 1-ᾱ_prev by an ulp when η = 1
        if radicand > -1e-12 {
            radicand = 0.0;
        } else {
            return Err(Error::invalid(format!("negative DDIM radicand {radicand}")));
        }
    }
    let a = ab_prev.sqrt();
    let b = radicand.sqrt();
    Volume::from_vec(
        x_hat.dims(),
        x_hat
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(eps_fresh.data())
            .map(|((x, e), f)| a * x + b * e + sigma * f)
            .collect(),
    )
}

fn combine(a: &Volume, wa: f64, b: &Volume, wb: f64) -> Volume {
    Volume::from_vec(a.dims(), a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect())
        .expect("dims checked")
}

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}
