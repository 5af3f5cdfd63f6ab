//! Whole-volume denoising from patch denoisers, unconditional generation,
//! and sparse-view reconstruction with recurrent noising.
//!
//! The noisy state lives on the padded grid. Padding voxels are known to be
//! zero in the clean volume, so after every whole-volume denoise the sampler
//! sets the clean estimate there to 0 and the noise estimate to the exact
//! value `x_t / √(1-ᾱ_t)` implied by a zero clean value.

use std::path::PathBuf;

use rand::Rng;

use crate::ct::{Projector, Sinogram};
use crate::denoiser::{Denoiser, PatchInput};
use crate::diffusion::{ddim_step, DdimParams, NoiseSchedule, SigmaRule};
use crate::error::{Error, Result};
use crate::grid::{downsample, insert_patches, unpad_volume, PatchGrid, PositionalField, Volume};
use crate::solver::cg_normal;
use crate::{io, par, rng};

const TAG_INIT: u64 = 0x1417;
const TAG_INNER: u64 = 0x5A4D;
const TAG_STEP: u64 = 0xDD1;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    /// Denoise-renoise repetitions per timestep.
    pub k: usize,
    pub cg_iters: usize,
    /// Data consistency runs on every `cg_every`-th timestep.
    pub cg_every: usize,
    pub sigma_rule: SigmaRule,
    pub seed: u64,
    /// Writes the interior of each step's clean estimate here when set.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 200,
            eta: 0.8,
            k: 2,
            cg_iters: 5,
            cg_every: 1,
            sigma_rule: SigmaRule::Dds,
            seed: 0,
            dump_dir: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.cg_every == 0 {
            return Err(Error::invalid("cg_every must be at least 1"));
        }
        DdimParams::new(self.eta, self.sigma_rule)?;
        schedule.subsequence(self.steps)?;
        Ok(())
    }
}

/// Clean and noise estimates on the padded grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEstimatePair {
    pub x_hat: Volume,
    pub eps_hat: Volume,
}

/// Denoises every patch of offset `offset_index` (1-based) and reassembles
/// both outputs. Voxels outside the offset's patches are zero.
pub fn denoise_whole_volume<D: Denoiser + ?Sized>(
    x_t: &Volume,
    grid: &PatchGrid,
    offset_index: usize,
    denoiser: &D,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VolumeEstimatePair> {
    denoise_with_field(x_t, grid, &PositionalField::new(grid), offset_index, denoiser, t, schedule)
}

fn denoise_with_field<D: Denoiser + ?Sized>(
    x_t: &Volume,
    grid: &PatchGrid,
    field: &PositionalField,
    offset_index: usize,
    denoiser: &D,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VolumeEstimatePair> {
    if x_t.dims() != grid.padded_dims() {
        return Err(Error::shape(format!("expected padded dims {:?}, got {:?}", grid.padded_dims(), x_t.dims())));
    }
    schedule.check_t(t)?;
    let p = grid.patch_size();
    let context = downsample(&unpad_volume(x_t, p)?, grid)?;
    let starts = grid.patch_starts(offset_index)?;
    let outputs = par::map_slice(&starts, |&s| {
        let input = PatchInput::new(x_t.crop(s, [p; 3]), context.clone(), field.patch_at(s, p), t)?;
        denoiser.denoise(&input, schedule)
    });
    let mut eps = Vec::with_capacity(starts.len());
    let mut x0 = Vec::with_capacity(starts.len());
    for o in outputs {
        let o = o?;
        eps.push(o.eps_pred);
        x0.push(o.x0_pred);
    }
    Ok(VolumeEstimatePair { x_hat: insert_patches(&x0, grid, offset_index)?, eps_hat: insert_patches(&eps, grid, offset_index)? })
}

/// Average of [`denoise_whole_volume`] over all `P³` offsets. Test oracle
/// only; rejects `P > 4`.
pub fn score_full_average<D: Denoiser + ?Sized>(
    x_t: &Volume,
    grid: &PatchGrid,
    denoiser: &D,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VolumeEstimatePair> {
    if grid.patch_size() > 4 {
        return Err(Error::invalid(format!(
            "full offset average is limited to patch size 4, got {}",
            grid.patch_size()
        )));
    }
    let field = PositionalField::new(grid);
    let n = grid.num_offsets();
    let mut acc = VolumeEstimatePair { x_hat: Volume::zeros(grid.padded_dims()), eps_hat: Volume::zeros(grid.padded_dims()) };
    for i in 1..=n {
        let pair = denoise_with_field(x_t, grid, &field, i, denoiser, t, schedule)?;
        acc.x_hat.axpy(1.0, &pair.x_hat);
        acc.eps_hat.axpy(1.0, &pair.eps_hat);
    }
    acc.x_hat.scale(1.0 / n as f64);
    acc.eps_hat.scale(1.0 / n as f64);
    Ok(acc)
}

/// Mean of the clean estimates and `1/√K` times the sum of the noise estimates.
pub fn combine_estimates(pairs: &[VolumeEstimatePair]) -> Result<VolumeEstimatePair> {
    let first = pairs.first().ok_or_else(|| Error::invalid("no estimates to combine"))?;
    let mut x_hat = Volume::zeros(first.x_hat.dims());
    let mut eps_hat = Volume::zeros(first.eps_hat.dims());
    for p in pairs {
        if p.x_hat.dims() != x_hat.dims() || p.eps_hat.dims() != eps_hat.dims() {
            return Err(Error::shape("estimates differ in dims"));
        }
        x_hat.axpy(1.0, &p.x_hat);
        eps_hat.axpy(1.0, &p.eps_hat);
    }
    let k = pairs.len() as f64;
    x_hat.scale(1.0 / k);
    eps_hat.scale(1.0 / k.sqrt());
    Ok(VolumeEstimatePair { x_hat, eps_hat })
}

/// Replaces the padding of a pair with the exact zero-prior estimates.
fn clamp_padding(pair: &mut VolumeEstimatePair, x_t: &Volume, grid: &PatchGrid, alpha_bar: f64) {
    let p = grid.patch_size();
    let n = grid.image_dims();
    let d = grid.padded_dims();
    let inv = 1.0 / (1.0 - alpha_bar).sqrt();
    let inside = |c: usize, a: usize| c >= p && c < p + n[a];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if inside(x, 0) && inside(y, 1) && inside(z, 2) {
                    continue;
                }
                let i = x_t.index(x, y, z);
                pair.x_hat.data_mut()[i] = 0.0;
                pair.eps_hat.data_mut()[i] = x_t.data()[i] * inv;
            }
        }
    }
}

struct DataTerm<'a> {
    projector: &'a Projector,
    y: &'a Sinogram,
}

fn run<D: Denoiser + ?Sized>(
    denoiser: &D,
    grid: &PatchGrid,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    data: Option<DataTerm<'_>>,
) -> Result<Volume> {
    config.validate(schedule)?;
    let params = DdimParams::new(config.eta, config.sigma_rule)?;
    let ts = schedule.subsequence(config.steps)?;
    let p = grid.patch_size();
    let dims = grid.padded_dims();
    let nvox = dims.iter().product();
    let field = PositionalField::new(grid);
    if let Some(dir) = &config.dump_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut x = Volume::from_vec(dims, rng::normal_vec(&mut rng::stream(config.seed, &[TAG_INIT]), nvox))?;
    for (idx, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(idx + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let mut x_w = x.clone();
        let mut pairs = Vec::with_capacity(config.k);
        for w in 1..=config.k {
            let mut r = rng::stream(config.seed, &[TAG_INNER, t as u64, w as u64]);
            let offset = r.random_range(1..=grid.num_offsets());
            log::debug!("step={t} w={w} offset={offset}");
            let mut pair = denoise_with_field(&x_w, grid, &field, offset, denoiser, t, schedule)?;
            clamp_padding(&mut pair, &x_w, grid, ab);
            if w < config.k {
                let fresh = Volume::from_vec(dims, rng::normal_vec(&mut r, nvox))?;
                x_w = pair.x_hat.clone();
                x_w.scale(ab.sqrt());
                x_w.axpy((1.0 - ab).sqrt(), &fresh);
            }
            pairs.push(pair);
        }
        let VolumeEstimatePair { mut x_hat, eps_hat } = combine_estimates(&pairs)?;

        if let Some(d) = &data {
            if config.cg_iters > 0 && idx % config.cg_every == 0 {
                let interior = unpad_volume(&x_hat, p)?;
                let solved = cg_normal(
                    |v: &Volume| d.projector.project(v),
                    |s: &Sinogram| d.projector.backproject(s),
                    d.y,
                    &interior,
                    config.cg_iters,
                    0.0,
                )?;
                x_hat.paste([p; 3], &solved);
            }
        }
        if let Some(dir) = &config.dump_dir {
            io::save_volume(&dir.join(format!("step_{t:04}.pdv")), &unpad_volume(&x_hat, p)?)?;
        }

        let fresh = Volume::from_vec(dims, rng::normal_vec(&mut rng::stream(config.seed, &[TAG_STEP, t as u64]), nvox))?;
        x = ddim_step(&x_hat, &eps_hat, &fresh, t, t_prev, &params, schedule)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
    }
    unpad_volume(&x, p)
}

/// Draws one volume from the prior; returns the unpadded image.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    denoiser: &D,
    grid: &PatchGrid,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Volume> {
    run(denoiser, grid, schedule, config, None)
}

/// Posterior sampling for `y ≈ A x` with CG data consistency on the image.
pub fn reconstruct<D: Denoiser + ?Sized>(
    denoiser: &D,
    grid: &PatchGrid,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    projector: &Projector,
    y: &Sinogram,
) -> Result<Volume> {
    if projector.image_dims() != grid.image_dims() {
        return Err(Error::shape(format!(
            "projector image {:?} differs from the patch grid image {:?}",
            projector.image_dims(),
            grid.image_dims()
        )));
    }
    projector.check_sinogram(y)?;
    run(denoiser, grid, schedule, config, Some(DataTerm { projector, y }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserOutput, GaussianOracle};
    use crate::grid::extract_patches;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn noisy_padded(grid: &PatchGrid, seed: u64) -> Volume {
        let d = grid.padded_dims();
        Volume::from_vec(d, rng::normal_vec(&mut rng::stream(seed, &[]), d.iter().product())).unwrap()
    }

    #[test]
    fn oracle_output_is_offset_invariant_on_covered_interior() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = schedule();
        let oracle = GaussianOracle::new(0.3, 0.5).unwrap();
        let x = noisy_padded(&grid, 1);
        let a = denoise_whole_volume(&x, &grid, 1, &oracle, 500, &s).unwrap();
        let b = denoise_whole_volume(&x, &grid, 8, &oracle, 500, &s).unwrap();
        let ab = s.alpha_bar(500);
        let ua = unpad_volume(&a.x_hat, 2).unwrap();
        let ub = unpad_volume(&b.x_hat, 2).unwrap();
        let ux = unpad_volume(&x, 2).unwrap();
        for i in 0..ua.len() {
            assert!((ua.data()[i] - ub.data()[i]).abs() < 1e-6);
            assert!((ua.data()[i] - oracle.posterior_mean(ux.data()[i], ab)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_zero_mean_oracle() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let oracle = GaussianOracle::new(0.0, 1.0).unwrap();
        let pair = denoise_whole_volume(&Volume::zeros(grid.padded_dims()), &grid, 3, &oracle, 10, &schedule()).unwrap();
        assert!(pair.x_hat.data().iter().all(|&v| v == 0.0));
    }

    struct Tagged;

    impl Denoiser for Tagged {
        // output depends on the whole patch, so tiling errors would show
        fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput> {
            let s: f64 = input.noisy.data().iter().sum::<f64>() + input.position[0].get(0, 0, 0);
            DenoiserOutput::from_eps(input, input.noisy.map(|v| v * 0.5 + s), schedule)
        }
    }

    #[test]
    fn patches_tile_without_overlap() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = schedule();
        let x = noisy_padded(&grid, 5);
        let field = PositionalField::new(&grid);
        for offset in [1, 6] {
            let pair = denoise_whole_volume(&x, &grid, offset, &Tagged, 700, &s).unwrap();
            let eps_patches = extract_patches(&pair.eps_hat, &grid, offset).unwrap();
            let ctx = downsample(&unpad_volume(&x, 2).unwrap(), &grid).unwrap();
            for (st, got) in grid.patch_starts(offset).unwrap().into_iter().zip(eps_patches) {
                let input = PatchInput::new(x.crop(st, [2; 3]), ctx.clone(), field.patch_at(st, 2), 700).unwrap();
                assert_eq!(Tagged.denoise(&input, &s).unwrap().eps_pred, got);
            }
            let mask = grid.coverage_mask(offset).unwrap();
            for (m, v) in mask.data().iter().zip(pair.x_hat.data()) {
                if *m == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn full_average_equals_single_offset_for_oracle() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = schedule();
        let oracle = GaussianOracle::new(-0.2, 0.7).unwrap();
        let x = noisy_padded(&grid, 9);
        let full = score_full_average(&x, &grid, &oracle, 300, &s).unwrap();
        let one = denoise_whole_volume(&x, &grid, 4, &oracle, 300, &s).unwrap();
        let a = unpad_volume(&full.eps_hat, 2).unwrap();
        let b = unpad_volume(&one.eps_hat, 2).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-6);
        }
        let big = PatchGrid::new([8, 8, 8], 8).unwrap();
        assert!(score_full_average(&Volume::zeros(big.padded_dims()), &big, &oracle, 1, &s).is_err());
    }

    struct Sum<A, B>(A, B);

    impl<A: Denoiser, B: Denoiser> Denoiser for Sum<A, B> {
        fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput> {
            let mut e = self.0.denoise(input, schedule)?.eps_pred;
            e.axpy(1.0, &self.1.denoise(input, schedule)?.eps_pred);
            DenoiserOutput::from_eps(input, e, schedule)
        }
    }

    #[test]
    fn full_average_is_linear_in_the_denoiser() {
        let grid = PatchGrid::new([2, 2, 2], 2).unwrap();
        let s = schedule();
        let x = noisy_padded(&grid, 2);
        let a = GaussianOracle::new(0.1, 0.4).unwrap();
        let sum = score_full_average(&x, &grid, &Sum(a, Tagged), 200, &s).unwrap();
        let fa = score_full_average(&x, &grid, &a, 200, &s).unwrap();
        let fb = score_full_average(&x, &grid, &Tagged, 200, &s).unwrap();
        for i in 0..sum.eps_hat.len() {
            let e = fa.eps_hat.data()[i] + fb.eps_hat.data()[i];
            assert!((sum.eps_hat.data()[i] - e).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = schedule();
        let oracle = GaussianOracle::new(0.5, 0.2).unwrap();
        let cfg = SamplerConfig { steps: 20, eta: 0.0, k: 1, ..SamplerConfig::default() };
        let a = sample_unconditional(&oracle, &grid, &s, &cfg).unwrap();
        let b = sample_unconditional(&oracle, &grid, &s, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_unconditional(&oracle, &grid, &s, &SamplerConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let s = schedule();
        assert!(SamplerConfig { k: 0, ..SamplerConfig::default() }.validate(&s).is_err());
        assert!(SamplerConfig { steps: 0, ..SamplerConfig::default() }.validate(&s).is_err());
        assert!(SamplerConfig { eta: 1.5, ..SamplerConfig::default() }.validate(&s).is_err());
        assert!(SamplerConfig::default().validate(&s).is_ok());
    }

    #[test]
    fn offsets_are_uniform() {
        // the sampler's offset draws over many (t, w) pairs; χ² with 7 dof, 0.01 critical value 18.48
        let grid = PatchGrid::new([2, 2, 2], 2).unwrap();
        let mut counts = [0usize; 8];
        for t in 1..=1000u64 {
            for w in 1..=4u64 {
                let mut r = rng::stream(7, &[TAG_INNER, t, w]);
                counts[r.random_range(1..=grid.num_offsets()) - 1] += 1;
            }
        }
        let e = 4000.0 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 18.48, "chi2 {chi2}");
    }

    #[test]
    fn reconstruction_dumps_steps_and_checks_geometry() {
        use crate::ct::CtGeometry;
        let grid = PatchGrid::new([4, 4, 2], 2).unwrap();
        let s = schedule();
        let truth = Volume::from_fn([4, 4, 2], |x, y, _| if x == 1 && y == 2 { 1.0 } else { 0.2 });
        let geom = CtGeometry::for_image(4, 4, 4).unwrap();
        let proj = Projector::new(&geom, [4, 4, 2]).unwrap();
        let y = proj.project(&truth).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SamplerConfig { steps: 5, k: 2, dump_dir: Some(dir.path().to_path_buf()), ..SamplerConfig::default() };
        let oracle = GaussianOracle::new(0.2, 0.3).unwrap();
        let out = reconstruct(&oracle, &grid, &s, &cfg, &proj, &y).unwrap();
        assert_eq!(out.dims(), [4, 4, 2]);
        assert!(out.is_finite());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 5);
        // mismatched measurement is rejected
        let other = Projector::new(&CtGeometry::for_image(3, 4, 4).unwrap(), [4, 4, 2]).unwrap();
        assert!(reconstruct(&oracle, &grid, &s, &cfg, &other, &y).is_err());
    }
}
