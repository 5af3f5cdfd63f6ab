//! Denoising score-matching training of the patch denoiser.
//!
//! Each draw noises the whole zero-padded volume at a uniform timestep,
//! cuts one patch at a uniform start in `{0..N+P}³`, and regresses the
//! network output onto the matching slice of the same noise field.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{ConvDenoiser, ConvDenoiserConfig, ConvParams, PatchInput};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::{downsample, pad_volume, unpad_volume, PatchGrid, PositionalField, Volume};
use crate::io::{self, Checkpoint};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Patches per optimizer step.
    pub batch: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub patch_size: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    /// Patches drawn from each noised volume; they share `t`, the noise field and `D x_t`.
    pub patches_per_volume: usize,
    pub checkpoint_every: u64,
    pub net: ConvDenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 32,
            steps: 2000,
            ema_decay: 0.999,
            patch_size: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            patches_per_volume: 4,
            checkpoint_every: 500,
            net: ConvDenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("EMA decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.batch == 0 || self.patches_per_volume == 0 || self.patch_size == 0 {
            return Err(Error::invalid("batch, patches per volume and patch size must be positive"));
        }
        self.net.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// One training draw: network input, regression target `G_c ε`, and bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: PatchInput,
    pub target: Volume,
    pub t: usize,
    pub start: [usize; 3],
}

/// Volume-level quantities shared by every patch cut from one noised volume.
pub struct NoisedVolume {
    pub t: usize,
    pub eps: Volume,
    pub x_t: Volume,
    pub context: Volume,
}

/// Draws `t`, noises the padded volume, and computes `D x_t`.
pub fn noise_volume(
    padded: &Volume,
    grid: &PatchGrid,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<NoisedVolume> {
    let t = rng.random_range(1..=schedule.timesteps());
    let eps = Volume::from_vec(padded.dims(), rng::normal_vec(rng, padded.len()))?;
    let x_t = forward_noise(padded, t, &eps, schedule)?;
    let context = downsample(&unpad_volume(&x_t, grid.patch_size())?, grid)?;
    Ok(NoisedVolume { t, eps, x_t, context })
}

/// Cuts one patch at a uniform start over `{0..N+P}³`.
pub fn cut_patch(
    noised: &NoisedVolume,
    grid: &PatchGrid,
    field: &PositionalField,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let p = grid.patch_size();
    let img = grid.image_dims();
    let start = [0, 1, 2].map(|a| rng.random_range(0..=img[a] + p));
    let size = [p; 3];
    let input = PatchInput::new(
        noised.x_t.crop(start, size),
        noised.context.clone(),
        field.patch_at(start, p),
        noised.t,
    )?;
    Ok(TrainingSample { input, target: noised.eps.crop(start, size), t: noised.t, start })
}

/// Single training draw from an unpadded volume.
pub fn sample_training_patch(
    volume: &Volume,
    grid: &PatchGrid,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    if volume.dims() != grid.image_dims() {
        return Err(Error::shape(format!(
            "training volume {:?} does not match grid {:?}",
            volume.dims(),
            grid.image_dims()
        )));
    }
    let padded = pad_volume(volume, grid.patch_size())?;
    let noised = noise_volume(&padded, grid, schedule, rng)?;
    cut_patch(&noised, grid, &PositionalField::new(grid), rng)
}

/// Mean over the batch of ‖ε_pred − target‖² / P³, and its parameter gradient.
pub fn loss_and_grad(net: &ConvDenoiser, batch: &[TrainingSample]) -> Result<(f64, ConvParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(f64, ConvParams)>> = par::map_slice(batch, |s| {
        let pred = net.forward(&s.input)?;
        let nvox = pred.len() as f64;
        let diff: Vec<f64> = pred.data().iter().zip(s.target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / nvox;
        let grad_out = Volume::from_vec(pred.dims(), diff.iter().map(|d| 2.0 * d * scale / nvox).collect())?;
        let (_, g) = net.backward(&s.input, &grad_out)?;
        Ok((loss, g))
    });
    let mut total = 0.0;
    let mut grad = net.params().zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grad.axpy(1.0, &g);
    }
    Ok((total * scale, grad))
}

/// Network, EMA shadow, Adam moments, and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: ConvDenoiser,
    pub ema: ConvParams,
    pub adam_m: ConvParams,
    pub adam_v: ConvParams,
    pub step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl TrainState {
    pub fn new(net: ConvDenoiserConfig) -> Result<Self> {
        let net = ConvDenoiser::init(net)?;
        let ema = net.params().clone();
        let zeros = net.params().zeros_like();
        Ok(TrainState { net, ema, adam_m: zeros.clone(), adam_v: zeros, step: 0 })
    }

    /// Denoiser carrying the EMA parameters.
    pub fn ema_denoiser(&self) -> ConvDenoiser {
        ConvDenoiser::new(self.net.config().clone(), self.ema.clone()).expect("EMA shares the layout")
    }

    /// Adam update plus EMA; all state is rounded to f32 afterwards.
    pub fn apply_gradient(&mut self, grad: &ConvParams, lr: f64, ema_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.step as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.step as f64);
        let params = self.net.params_mut();
        for ((((p, g), m), v), e) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.adam_m.values_mut())
            .zip(self.adam_v.values_mut())
            .zip(self.ema.values_mut())
        {
            *m = round(ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            *v = round(ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *p = round(*p - step);
            *e = round(ema_decay * *e + (1.0 - ema_decay) * *p);
        }
    }
}

fn round(v: f64) -> f64 {
    v as f32 as f64
}

/// One optimizer step on a prepared batch; returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[TrainingSample], config: &TrainConfig) -> Result<f64> {
    let (loss, grad) = loss_and_grad(&state.net, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", state.step + 1)));
    }
    state.apply_gradient(&grad, config.lr, config.ema_decay);
    Ok(loss)
}

/// Padded training set plus the grid-level constants.
pub struct Dataset {
    grid: PatchGrid,
    padded: Vec<Volume>,
    field: PositionalField,
}

impl Dataset {
    pub fn new(volumes: &[Volume], patch_size: usize) -> Result<Self> {
        let first = volumes.first().ok_or_else(|| Error::invalid("training set is empty"))?;
        let grid = PatchGrid::new(first.dims(), patch_size)?;
        let padded = volumes
            .iter()
            .map(|v| {
                if v.dims() != grid.image_dims() {
                    return Err(Error::shape(format!(
                        "training volumes must share dims {:?}, got {:?}",
                        grid.image_dims(),
                        v.dims()
                    )));
                }
                pad_volume(v, patch_size)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { field: PositionalField::new(&grid), grid, padded })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.padded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.padded.is_empty()
    }

    /// The batch for optimizer step `step` (1-based). Each volume group has
    /// its own random stream keyed by `(seed, step, group)`.
    pub fn batch(&self, step: u64, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<Vec<TrainingSample>> {
        let per = config.patches_per_volume.min(config.batch);
        let groups = config.batch.div_ceil(per);
        let drawn: Vec<Result<Vec<TrainingSample>>> = par::map_range(groups, |g| {
            let mut r = rng::stream(config.seed, &[0x7241, step, g as u64]);
            let vol = &self.padded[r.random_range(0..self.padded.len())];
            let noised = noise_volume(vol, &self.grid, schedule, &mut r)?;
            let take = per.min(config.batch - g * per);
            (0..take).map(|_| cut_patch(&noised, &self.grid, &self.field, &mut r)).collect()
        });
        let mut out = Vec::with_capacity(config.batch);
        for d in drawn {
            out.extend(d?);
        }
        Ok(out)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Bias-corrected exponential average of the loss (factor 0.98).
    pub ema_loss: f64,
}

/// Bias-corrected exponential average of the loss (factor 0.98).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTracker {
    smooth: f64,
    weight: f64,
}

impl LossTracker {
    /// Adds a loss and returns the current average.
    pub fn push(&mut self, loss: f64) -> f64 {
        self.smooth = 0.98 * self.smooth + 0.02 * loss;
        self.weight = 0.98 * self.weight + 0.02;
        self.smooth / self.weight
    }
}

/// Runs `config.steps` optimizer steps in total (counting any already in
/// `state`), invoking `on_step` after each.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    train_tracked(dataset, config, state, &mut LossTracker::default(), on_step)
}

/// [`train`] continuing an existing loss average.
pub fn train_tracked(
    dataset: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    tracker: &mut LossTracker,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if dataset.grid().patch_size() != config.patch_size {
        return Err(Error::invalid("dataset patch size differs from the training config"));
    }
    let schedule = config.schedule()?;
    let mut records = Vec::new();
    while state.step < config.steps {
        let batch = dataset.batch(state.step + 1, config, &schedule)?;
        let loss = train_step(state, &batch, config)?;
        let rec = StepRecord { step: state.step, loss, ema_loss: tracker.push(loss) };
        on_step(state, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Training with periodic and final checkpoints at `out`, and the loss curve
/// as CSV at `curve`. Resumes from `resume` when given.
pub fn train_to_files(
    volumes: &[Volume],
    config: &TrainConfig,
    config_echo: &str,
    out: &Path,
    curve: &Path,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    let dataset = Dataset::new(volumes, config.patch_size)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config.net.clone())?,
    };
    // keep the curve rows up to the resumed step and replay their losses
    let mut tracker = LossTracker::default();
    let mut kept = String::from("step,loss,ema_loss\n");
    if state.step > 0 && curve.exists() {
        for line in std::fs::read_to_string(curve)?.lines().skip(1) {
            let mut cols = line.split(',');
            let (Some(step), Some(loss)) = (cols.next(), cols.next()) else { continue };
            let (Ok(step), Ok(loss)) = (step.parse::<u64>(), loss.parse::<f64>()) else {
                return Err(Error::format(format!("bad loss curve row '{line}'")));
            };
            if step > state.step {
                break;
            }
            tracker.push(loss);
            kept.push_str(line);
            kept.push('\n');
        }
    }
    let mut csv = BufWriter::new(File::create(curve)?);
    csv.write_all(kept.as_bytes())?;
    train_tracked(&dataset, config, &mut state, &mut tracker, |st, rec| {
        writeln!(csv, "{},{},{}", rec.step, rec.loss, rec.ema_loss)?;
        if config.checkpoint_every > 0 && st.step % config.checkpoint_every == 0 {
            csv.flush()?;
            io::save_checkpoint(out, &Checkpoint::from_state(st, config_echo))?;
        }
        Ok(())
    })?;
    csv.flush()?;
    io::save_checkpoint(out, &Checkpoint::from_state(&state, config_echo))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch: 4,
            patch_size: 2,
            patches_per_volume: 2,
            net: ConvDenoiserConfig { width: 4, depth: 2, kernel: 3, embed_dim: 4, seed: 1, global_context: true },
            ..TrainConfig::default()
        }
    }

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, |x, y, z| (x + y + z) as f64 / 10.0)
    }

    #[test]
    fn training_draw_is_reproducible_and_target_is_noise_slice() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let v = ramp([4, 4, 4]);
        let a = sample_training_patch(&v, &grid, &s, &mut rng::stream(3, &[])).unwrap();
        let b = sample_training_patch(&v, &grid, &s, &mut rng::stream(3, &[])).unwrap();
        assert_eq!((a.t, a.start), (b.t, b.start));
        assert_eq!(a.target, b.target);
        assert_eq!(a.input, b.input);

        // rebuild the noise field from the same stream and slice it
        let mut r = rng::stream(3, &[]);
        let padded = pad_volume(&v, 2).unwrap();
        let noised = noise_volume(&padded, &grid, &s, &mut r).unwrap();
        assert_eq!(noised.eps.crop(a.start, [2; 3]), a.target);
        let x_t = forward_noise(&padded, a.t, &noised.eps, &s).unwrap();
        assert_eq!(x_t.crop(a.start, [2; 3]), a.input.noisy);
        assert!(a.start.iter().all(|&c| c <= 6));
        assert!(sample_training_patch(&Volume::zeros([4, 4, 2]), &grid, &s, &mut r).is_err());
    }

    #[test]
    fn border_patch_sees_padding_but_valid_positions() {
        let grid = PatchGrid::new([4, 4, 4], 2).unwrap();
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let padded = pad_volume(&Volume::filled([4, 4, 4], 1.0), 2).unwrap();
        let mut r = rng::stream(0, &[]);
        let noised = noise_volume(&padded, &grid, &s, &mut r).unwrap();
        let field = PositionalField::new(&grid);
        for _ in 0..50 {
            let smp = cut_patch(&noised, &grid, &field, &mut r).unwrap();
            let clean = padded.crop(smp.start, [2; 3]);
            if smp.start.contains(&0) {
                assert!(clean.data().contains(&0.0));
            }
            for p in &smp.input.position {
                assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn perfect_and_zero_predictions() {
        let cfg = tiny_config();
        let s = cfg.schedule().unwrap();
        let ds = Dataset::new(&[ramp([4, 4, 4])], 2).unwrap();
        let batch = ds.batch(1, &cfg, &s).unwrap();
        assert_eq!(batch.len(), 4);

        // zero network: loss = mean ‖target‖² / P³
        let zero = ConvDenoiser::new(cfg.net.clone(), ConvParams::zeros(&cfg.net)).unwrap();
        let (loss, _) = loss_and_grad(&zero, &batch).unwrap();
        let expect = batch.iter().map(|b| b.target.dot(&b.target) / 8.0).sum::<f64>() / 4.0;
        assert!((loss - expect).abs() < 1e-12);

        // targets equal to the prediction: zero loss, zero gradient
        let net = ConvDenoiser::init(cfg.net.clone()).unwrap();
        let matched: Vec<TrainingSample> = batch
            .iter()
            .map(|b| TrainingSample { target: net.forward(&b.input).unwrap(), ..b.clone() })
            .collect();
        let (loss, grad) = loss_and_grad(&net, &matched).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let s = cfg.schedule().unwrap();
        let ds = Dataset::new(&[ramp([4, 4, 4])], 2).unwrap();
        let batch = ds.batch(2, &cfg, &s).unwrap();
        let net = ConvDenoiser::init(cfg.net.clone()).unwrap();
        let (_, grad) = loss_and_grad(&net, &batch).unwrap();
        let h = 1e-5;
        for ti in 0..net.params().tensors.len() {
            for i in (0..net.params().tensors[ti].data.len()).step_by(5) {
                let mut p = net.clone();
                p.params_mut().tensors[ti].data[i] += h;
                let mut m = net.clone();
                m.params_mut().tensors[ti].data[i] -= h;
                let fd = (loss_and_grad(&p, &batch).unwrap().0 - loss_and_grad(&m, &batch).unwrap().0) / (2.0 * h);
                let an = grad.tensors[ti].data[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "tensor {ti}[{i}] fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn ema_diverges_from_raw_after_two_steps() {
        let cfg = tiny_config();
        let ds = Dataset::new(&[ramp([4, 4, 4])], 2).unwrap();
        let mut st = TrainState::new(cfg.net.clone()).unwrap();
        let mut run = TrainConfig { steps: 2, ..cfg };
        run.validate().unwrap();
        train(&ds, &run, &mut st, |_, _| Ok(())).unwrap();
        assert_eq!(st.step, 2);
        assert_ne!(&st.ema, st.net.params());
        run.ema_decay = 1.0;
        assert!(run.validate().is_err());
    }

    #[test]
    fn timestep_draws_are_uniform() {
        // χ² over 10 equal bins of [1, 1000], 10⁴ draws; 0.01 critical value at 9 dof is 21.67
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let grid = PatchGrid::new([2, 2, 2], 2).unwrap();
        let padded = pad_volume(&Volume::zeros([2, 2, 2]), 2).unwrap();
        let mut bins = [0usize; 10];
        for i in 0..10_000u64 {
            let mut r = rng::stream(42, &[i]);
            let n = noise_volume(&padded, &grid, &s, &mut r).unwrap();
            bins[(n.t - 1) / 100] += 1;
        }
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(chi2 < 21.67, "chi2 {chi2}");
    }
}
