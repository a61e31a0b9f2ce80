//! Flat run configuration: defaults, JSON config-file merge, and strict
//! validation. Flags override the file; the file overrides defaults.
//! Unknown keys in the file are rejected to catch misspelled knobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::WalkConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for scan generation and evaluation; 0 = all cores.
    pub workers: usize,
    pub crop_velocity_decay: f64,
    pub crop_noise_std: f64,
    pub focus_velocity_decay: f64,
    pub focus_noise_std: f64,
    pub crop_size: usize,
    pub scan_frames: usize,
    pub patch_size: usize,
    pub mlr_sigma: f64,
    pub gamma: f64,
    pub ema_beta: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_span: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub warmup_transitions: usize,
    pub learn_every: usize,
    pub total_experiences: u64,
    pub validation_every: usize,
    pub learning_rate: f64,
    pub rmsprop_smoothing: f64,
    pub rmsprop_epsilon: f64,
    pub initial_f: f64,
    pub smoothing_window: usize,
    pub bootstrap_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let walk = WalkConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            workers: 0,
            crop_velocity_decay: walk.crop_velocity_decay,
            crop_noise_std: walk.crop_noise_std,
            focus_velocity_decay: walk.focus_velocity_decay,
            focus_noise_std: walk.focus_noise_std,
            crop_size: 128,
            scan_frames: 250,
            patch_size: 32,
            mlr_sigma: crate::metrics::DEFAULT_MLR_SIGMA,
            gamma: train.gamma,
            ema_beta: train.ema_beta,
            epsilon_start: train.epsilon_start,
            epsilon_end: train.epsilon_end,
            epsilon_decay_span: train.epsilon_decay_span,
            replay_capacity: train.replay_capacity,
            batch_size: train.batch_size,
            warmup_transitions: train.warmup_transitions,
            learn_every: train.learn_every,
            total_experiences: train.total_experiences,
            validation_every: train.validation_every,
            learning_rate: train.learning_rate,
            rmsprop_smoothing: train.rmsprop_smoothing,
            rmsprop_epsilon: train.rmsprop_epsilon,
            initial_f: 0.5,
            smoothing_window: crate::bench::DEFAULT_SMOOTHING_WINDOW,
            bootstrap_iterations: 10_000,
        }
    }
}

/// File form: every field optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    seed: Option<u64>,
    workers: Option<usize>,
    crop_velocity_decay: Option<f64>,
    crop_noise_std: Option<f64>,
    focus_velocity_decay: Option<f64>,
    focus_noise_std: Option<f64>,
    crop_size: Option<usize>,
    scan_frames: Option<usize>,
    patch_size: Option<usize>,
    mlr_sigma: Option<f64>,
    gamma: Option<f64>,
    ema_beta: Option<f64>,
    epsilon_start: Option<f64>,
    epsilon_end: Option<f64>,
    epsilon_decay_span: Option<u64>,
    replay_capacity: Option<usize>,
    batch_size: Option<usize>,
    warmup_transitions: Option<usize>,
    learn_every: Option<usize>,
    total_experiences: Option<u64>,
    validation_every: Option<usize>,
    learning_rate: Option<f64>,
    rmsprop_smoothing: Option<f64>,
    rmsprop_epsilon: Option<f64>,
    initial_f: Option<f64>,
    smoothing_window: Option<usize>,
    bootstrap_iterations: Option<usize>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field { $dst.$field = v; } )+
    };
}

impl RunConfig {
    /// Defaults overlaid with an optional JSON config file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let raw = fs::read(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg = Self::from_json(&raw)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    /// Defaults overlaid with config-file JSON, then validated.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: RunConfigFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        cfg.apply(file);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, file: RunConfigFile) {
        merge_fields!(
            self, file, seed, workers, crop_velocity_decay, crop_noise_std,
            focus_velocity_decay, focus_noise_std, crop_size, scan_frames, patch_size,
            mlr_sigma, gamma, ema_beta, epsilon_start, epsilon_end, epsilon_decay_span,
            replay_capacity, batch_size, warmup_transitions, learn_every,
            total_experiences, validation_every, learning_rate, rmsprop_smoothing,
            rmsprop_epsilon, initial_f, smoothing_window, bootstrap_iterations,
        );
    }

    pub fn validate(&self) -> Result<()> {
        self.walk_config(self.seed).validate()?;
        self.train_config().validate()?;
        if self.crop_size < self.patch_size {
            return Err(Error::Config(format!(
                "crop_size {} smaller than patch_size {}",
                self.crop_size, self.patch_size
            )));
        }
        if self.scan_frames == 0 {
            return Err(Error::Config("scan_frames must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_f) {
            return Err(Error::Config("initial_f must be in [0,1]".into()));
        }
        if !(self.mlr_sigma > 0.0) {
            return Err(Error::Config("mlr_sigma must be positive".into()));
        }
        if self.smoothing_window == 0 || self.bootstrap_iterations == 0 {
            return Err(Error::Config(
                "smoothing_window and bootstrap_iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn walk_config(&self, seed: u64) -> WalkConfig {
        WalkConfig {
            crop_velocity_decay: self.crop_velocity_decay,
            crop_noise_std: self.crop_noise_std,
            focus_velocity_decay: self.focus_velocity_decay,
            focus_noise_std: self.focus_noise_std,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            ema_beta: self.ema_beta,
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_decay_span: self.epsilon_decay_span,
            replay_capacity: self.replay_capacity,
            batch_size: self.batch_size,
            warmup_transitions: self.warmup_transitions,
            learn_every: self.learn_every,
            total_experiences: self.total_experiences,
            validation_every: self.validation_every,
            learning_rate: self.learning_rate,
            rmsprop_smoothing: self.rmsprop_smoothing,
            rmsprop_epsilon: self.rmsprop_epsilon,
            patch_size: self.patch_size,
            seed: self.seed,
        }
    }
}
