//! Plain-text run configuration: `key = value` lines, `#` starts a comment.
//! Every key is optional; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::ConvDenoiserConfig;
use crate::diffusion::{NoiseSchedule, SigmaRule};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub patch_size: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub steps: usize,
    pub k: usize,
    pub cg_iters: usize,
    pub cg_every: usize,
    pub sigma_rule: SigmaRule,
    pub seed: u64,
    pub views: usize,
    pub noise_sigma: f64,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: u64,
    pub ema_decay: f64,
    pub net_width: usize,
    pub net_depth: usize,
    pub global_context: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            patch_size: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            eta: 0.8,
            steps: 200,
            k: 2,
            cg_iters: 5,
            cg_every: 1,
            sigma_rule: SigmaRule::Dds,
            seed: 0,
            views: 8,
            noise_sigma: 0.0,
            lr: 1e-3,
            batch: 32,
            train_steps: 2000,
            ema_decay: 0.999,
            net_width: 32,
            net_depth: 4,
            global_context: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "patch_size",
    "timesteps",
    "beta_start",
    "beta_end",
    "eta",
    "steps",
    "K",
    "cg_iters",
    "cg_every",
    "sigma_rule",
    "seed",
    "views",
    "noise_sigma",
    "lr",
    "batch",
    "train_steps",
    "ema_decay",
    "net_width",
    "net_depth",
    "global_context",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::invalid(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad value '{value}' for key '{key}'"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected 'key = value'", n + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "timesteps" => self.timesteps = parse_value(key, value)?,
            "beta_start" => self.beta_start = parse_value(key, value)?,
            "beta_end" => self.beta_end = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "K" => self.k = parse_value(key, value)?,
            "cg_iters" => self.cg_iters = parse_value(key, value)?,
            "cg_every" => self.cg_every = parse_value(key, value)?,
            "sigma_rule" => self.sigma_rule = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "views" => self.views = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "train_steps" => self.train_steps = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "net_width" => self.net_width = parse_value(key, value)?,
            "net_depth" => self.net_depth = parse_value(key, value)?,
            "global_context" => self.global_context = parse_bool(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "timesteps = {}", self.timesteps);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let _ = writeln!(s, "eta = {:?}", self.eta);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "K = {}", self.k);
        let _ = writeln!(s, "cg_iters = {}", self.cg_iters);
        let _ = writeln!(s, "cg_every = {}", self.cg_every);
        let _ = writeln!(s, "sigma_rule = {}", self.sigma_rule);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "views = {}", self.views);
        let _ = writeln!(s, "noise_sigma = {:?}", self.noise_sigma);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "train_steps = {}", self.train_steps);
        let _ = writeln!(s, "ema_decay = {:?}", self.ema_decay);
        let _ = writeln!(s, "net_width = {}", self.net_width);
        let _ = writeln!(s, "net_depth = {}", self.net_depth);
        let _ = writeln!(s, "global_context = {}", self.global_context);
        s
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn net_config(&self) -> ConvDenoiserConfig {
        ConvDenoiserConfig {
            width: self.net_width,
            depth: self.net_depth,
            seed: self.seed,
            global_context: self.global_context,
            ..ConvDenoiserConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            steps: self.train_steps,
            ema_decay: self.ema_decay,
            patch_size: self.patch_size,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed: self.seed,
            net: self.net_config(),
            ..TrainConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            eta: self.eta,
            k: self.k,
            cg_iters: self.cg_iters,
            cg_every: self.cg_every,
            sigma_rule: self.sigma_rule,
            seed: self.seed,
            dump_dir: None,
        }
    }
}

/// Full-scale U-Net hyperparameters, kept for reference. The conv denoiser in
/// this crate does not implement this architecture; see [`instantiate_preset`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnetPreset {
    pub name: &'static str,
    pub base_width: usize,
    pub channel_multipliers: [usize; 4],
    pub input_channels: usize,
    pub output_channels: usize,
    pub attention_resolution: [usize; 2],
    pub residual_blocks: usize,
    pub lr: f64,
    pub batch: usize,
    pub patch_size: usize,
}

pub const LARGE_UNET: UnetPreset = UnetPreset {
    name: "large-unet",
    base_width: 64,
    channel_multipliers: [1, 2, 4, 4],
    input_channels: 5,
    output_channels: 1,
    attention_resolution: [8, 8],
    residual_blocks: 2,
    lr: 2e-5,
    batch: 64,
    patch_size: 32,
};

pub fn preset(name: &str) -> Option<&'static UnetPreset> {
    (name == LARGE_UNET.name).then_some(&LARGE_UNET)
}

/// Always declines: the U-Net presets are documentation only.
pub fn instantiate_preset(name: &str) -> Result<ConvDenoiserConfig> {
    match preset(name) {
        Some(p) => Err(Error::invalid(format!(
            "preset '{}' describes a {}-wide attention U-Net that this build does not provide",
            p.name, p.base_width
        ))),
        None => Err(Error::invalid(format!("unknown preset '{name}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn values_and_comments() {
        let c = Config::parse("K = 3  # more noise\nsigma_rule = standard\neta=0.4\nglobal_context = false").unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.sigma_rule, SigmaRule::Standard);
        assert_eq!(c.eta, 0.4);
        assert!(!c.global_context);
        assert_eq!(c.patch_size, 8);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Config::parse("kk = 1").is_err());
        assert!(Config::parse("steps 10").is_err());
        assert!(Config::parse("steps = ten").is_err());
        assert!(Config::parse("sigma_rule = other").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.beta_start = 0.1 + 0.2;
        c.seed = 99;
        c.k = 4;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        for k in KEYS {
            assert!(c.to_text().contains(&format!("{k} = ")));
        }
    }

    #[test]
    fn large_preset_is_declined() {
        assert_eq!(preset("large-unet").unwrap().lr, 2e-5);
        assert!(instantiate_preset("large-unet").is_err());
        assert!(preset("other").is_none());
    }
}
