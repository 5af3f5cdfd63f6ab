//! Position-aware 3D patch diffusion prior with a downsampled global context
//! channel, and its use for sparse-view parallel-beam CT reconstruction.
//!
//! A volume is zero-padded by the patch size `P` and cut into non-overlapping
//! `P³` patches at one of `P³` offsets. A small convolutional network predicts
//! the noise of each patch from the noisy patch, a block-mean downsampled copy
//! of the whole noisy volume, and three coordinate channels. Sampling picks a
//! fresh random offset every step, so patch seams move around and average out.
//!
//! ```no_run
//! use patchdiff::{ct, eval, grid::PatchGrid, sampler, GaussianOracle, NoiseSchedule};
//! # fn main() -> patchdiff::Result<()> {
//! let truth = eval::generate_phantom(&eval::PhantomSpec::default(), [16, 16, 16])?;
//! let geom = ct::CtGeometry::for_image(8, 16, 16)?;
//! let a = ct::Projector::new(&geom, truth.dims())?;
//! let y = a.project(&truth)?;
//! let prior = GaussianOracle::new(0.2, 0.2)?;
//! let grid = PatchGrid::new([16, 16, 16], 4)?;
//! let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
//! let cfg = sampler::SamplerConfig { steps: 50, ..Default::default() };
//! let x = sampler::reconstruct(&prior, &grid, &schedule, &cfg, &a, &y)?;
//! println!("psnr={}", eval::psnr(&x, &truth, 1.0)?);
//! # Ok(())
//! # }
//! ```

pub mod config;
pub mod ct;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod solver;
pub mod training;

pub use denoiser::{ConvDenoiser, ConvDenoiserConfig, Denoiser, GaussianOracle, PatchInput};
pub use diffusion::{NoiseSchedule, SigmaRule};
pub use error::{Error, Result};
pub use grid::{PatchGrid, Volume};
