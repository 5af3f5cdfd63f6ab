//! Patch denoisers.
//!
//! A denoiser sees five `P³` channels (noisy patch, downsampled noisy
//! volume, and the x/y/z coordinate patches) plus the timestep, and predicts
//! the noise in the patch. The clean estimate is always derived from the
//! predicted noise, so the two outputs are consistent by construction.

mod conv;

pub use conv::{ConvDenoiser, ConvDenoiserConfig, ConvParams, Tensor};

use crate::diffusion::{denoised_estimate, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::Volume;

pub const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchInput {
    /// `G_c x_t`
    pub noisy: Volume,
    /// `D x_t`
    pub context: Volume,
    pub position: [Volume; 3],
    pub t: usize,
}

impl PatchInput {
    pub fn new(noisy: Volume, context: Volume, position: [Volume; 3], t: usize) -> Result<Self> {
        let d = noisy.dims();
        if context.dims() != d || position.iter().any(|p| p.dims() != d) {
            return Err(Error::shape("all five input channels must share the patch dims"));
        }
        Ok(PatchInput { noisy, context, position, t })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.noisy.dims()
    }

    /// Channels in network order.
    pub fn channels(&self) -> [&Volume; INPUT_CHANNELS] {
        [&self.noisy, &self.context, &self.position[0], &self.position[1], &self.position[2]]
    }

    /// Channel-major buffer, `5 × P³`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(INPUT_CHANNELS * self.noisy.len());
        for c in self.channels() {
            out.extend_from_slice(c.data());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_pred: Volume,
    pub x0_pred: Volume,
}

impl DenoiserOutput {
    pub fn from_eps(input: &PatchInput, eps_pred: Volume, schedule: &NoiseSchedule) -> Result<Self> {
        let x0_pred = denoised_estimate(&input.noisy, &eps_pred, input.t, schedule)?;
        Ok(DenoiserOutput { eps_pred, x0_pred })
    }
}

pub trait Denoiser: Sync {
    fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput> {
        (**self).denoise(input, schedule)
    }
}

/// Exact posterior-mean denoiser for an iid `N(mean, std²)` voxel prior.
/// Ignores every channel but the noisy patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle {
    mean: f64,
    std: f64,
}

impl GaussianOracle {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::invalid(format!("prior std must be positive, got {std}")));
        }
        Ok(GaussianOracle { mean, std })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// E[x0 | x_t] = (√ᾱ τ² x_t + (1-ᾱ) μ) / (ᾱ τ² + 1 - ᾱ)
    pub fn posterior_mean(&self, x_t: f64, alpha_bar: f64) -> f64 {
        let tau2 = self.std * self.std;
        (alpha_bar.sqrt() * tau2 * x_t + (1.0 - alpha_bar) * self.mean) / (alpha_bar * tau2 + 1.0 - alpha_bar)
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput> {
        schedule.check_t(input.t)?;
        let ab = schedule.alpha_bar(input.t);
        let s = (1.0 - ab).sqrt();
        let eps = input.noisy.map(|x| {
            if s == 0.0 {
                0.0
            } else {
                (x - ab.sqrt() * self.posterior_mean(x, ab)) / s
            }
        });
        DenoiserOutput::from_eps(input, eps, schedule)
    }
}
