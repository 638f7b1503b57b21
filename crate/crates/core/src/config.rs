//! Model shape, priors, loss weights, schedules and training knobs.
//!
//! Everything lives in one TOML file with the sections `[model]`, `[prior]`,
//! `[loss]`, `[[schedules]]`, `[train]` and `[eval]`. Missing keys take the
//! base hyperparameters, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the schedule driving the Bernoulli prior on presence.
pub const PRES_PRIOR_SCHEDULE: &str = "pres_prior";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// ResNet18 trunk followed by two transposed convolutions.
    Resnet18,
    /// A short stack of strided 3x3 convolutions, for small images and tests.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Dimension of each appearance latent.
    pub what_dim: usize,
    /// Number of mixture components (clusters).
    pub num_clusters: usize,
    pub glimpse_h: usize,
    pub glimpse_w: usize,
    pub anchor_h: f64,
    pub anchor_w: f64,
    pub mc_samples: usize,
    pub gumbel_temperature: f64,

    pub backbone: Backbone,
    /// Channels of the feature map handed to the heads.
    pub feature_channels: usize,
    /// Base width of the compact backbone; doubled at every stride-2 stage.
    pub compact_channels: usize,
    pub head_channels: usize,
    pub head_layers: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_input: usize,
    /// One transposed convolution per entry, each doubling the spatial size.
    pub decoder_channels: Vec<usize>,

    /// Straight-through hard presence samples during training.
    pub hard_pres: bool,
    /// Straight-through hard category samples during training.
    pub hard_cat: bool,
    /// Crop glimpses at a sampled location instead of the posterior mean.
    pub sample_where_for_glimpse: bool,
    /// Bound on the log scale of a box relative to its anchor.
    pub where_scale_clamp: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Standard deviation of the initial mixture means.
    pub mixture_init_std: f64,
    /// Pixel standard deviation of the Gaussian likelihood.
    pub recon_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            grid_h: 16,
            grid_w: 16,
            what_dim: 256,
            num_clusters: 10,
            glimpse_h: 32,
            glimpse_w: 32,
            anchor_h: 72.0,
            anchor_w: 72.0,
            mc_samples: 1,
            gumbel_temperature: 1.0,
            backbone: Backbone::Resnet18,
            feature_channels: 64,
            compact_channels: 32,
            head_channels: 128,
            head_layers: 3,
            encoder_hidden: vec![128, 256, 512],
            decoder_input: 256,
            decoder_channels: vec![128, 128, 64, 32, 16],
            hard_pres: true,
            hard_cat: false,
            sample_where_for_glimpse: false,
            where_scale_clamp: 1.5,
            log_std_min: -5.0,
            log_std_max: 5.0,
            mixture_init_std: 0.5,
            recon_std: 0.15,
        }
    }
}

impl ModelConfig {
    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell_h(&self) -> f64 {
        self.image_height as f64 / self.grid_h as f64
    }

    pub fn cell_w(&self) -> f64 {
        self.image_width as f64 / self.grid_w as f64
    }

    pub fn glimpse_len(&self) -> usize {
        3 * self.glimpse_h * self.glimpse_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_height", self.image_height),
            ("model.image_width", self.image_width),
            ("model.grid_h", self.grid_h),
            ("model.grid_w", self.grid_w),
            ("model.glimpse_h", self.glimpse_h),
            ("model.glimpse_w", self.glimpse_w),
            ("model.what_dim", self.what_dim),
            ("model.mc_samples", self.mc_samples),
            ("model.feature_channels", self.feature_channels),
            ("model.head_channels", self.head_channels),
            ("model.decoder_input", self.decoder_input),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::validation(key, "must be at least 1"));
            }
        }
        if self.num_clusters < 2 {
            return Err(Error::validation(
                "model.num_clusters",
                format!("must be at least 2, got {}", self.num_clusters),
            ));
        }
        if self.image_height % self.grid_h != 0 {
            return Err(Error::validation(
                "model.grid_h",
                "grid rows must tile the image height",
            ));
        }
        if self.image_width % self.grid_w != 0 {
            return Err(Error::validation(
                "model.grid_w",
                "grid columns must tile the image width",
            ));
        }
        if !(self.anchor_h > 0.0 && self.anchor_h.is_finite()) {
            return Err(Error::validation("model.anchor_h", "must be positive"));
        }
        if !(self.anchor_w > 0.0 && self.anchor_w.is_finite()) {
            return Err(Error::validation("model.anchor_w", "must be positive"));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::validation(
                "model.gumbel_temperature",
                "must be positive",
            ));
        }
        if !(self.recon_std > 0.0) {
            return Err(Error::validation("model.recon_std", "must be positive"));
        }
        if !(self.where_scale_clamp >= 0.0) {
            return Err(Error::validation(
                "model.where_scale_clamp",
                "must be nonnegative",
            ));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::validation(
                "model.log_std_min",
                "must be below model.log_std_max",
            ));
        }
        if self.glimpse_h != self.glimpse_w {
            return Err(Error::validation(
                "model.glimpse_w",
                "the glimpse decoder produces square glimpses",
            ));
        }
        if 1usize << self.decoder_channels.len() != self.glimpse_h {
            return Err(Error::validation(
                "model.decoder_channels",
                format!(
                    "{} upsampling stages give {}px glimpses, expected {}",
                    self.decoder_channels.len(),
                    1usize << self.decoder_channels.len(),
                    self.glimpse_h
                ),
            ));
        }
        if self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("model.decoder_channels", "zero width"));
        }
        if self.encoder_hidden.iter().any(|&c| c == 0) {
            return Err(Error::validation("model.encoder_hidden", "zero width"));
        }
        let stride_h = self.image_height / self.grid_h;
        let stride_w = self.image_width / self.grid_w;
        if stride_h != stride_w {
            return Err(Error::validation(
                "model.grid_w",
                "cells must be square in pixels",
            ));
        }
        match self.backbone {
            Backbone::Resnet18 => {
                if stride_h != 8 || self.image_height % 32 != 0 || self.image_width % 32 != 0 {
                    return Err(Error::validation(
                        "model.backbone",
                        "resnet18 needs 8px cells and image sides divisible by 32",
                    ));
                }
            }
            Backbone::Compact => {
                if !stride_h.is_power_of_two() {
                    return Err(Error::validation(
                        "model.backbone",
                        "compact backbone needs a power-of-two cell size",
                    ));
                }
                if self.compact_channels == 0 {
                    return Err(Error::validation("model.compact_channels", "zero width"));
                }
            }
        }
        Ok(())
    }
}

/// Fixed priors of the presence, location and depth latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Presence probability used when no `pres_prior` schedule is configured.
    pub pres_prob: f64,
    pub where_mean: f64,
    pub where_std: f64,
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            pres_prob: 1.0,
            where_mean: 0.0,
            where_std: 1.0,
            depth_mean: 0.0,
            depth_std: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pres_prob) {
            return Err(Error::validation("prior.pres_prob", "must lie in [0, 1]"));
        }
        if !(self.where_std > 0.0) {
            return Err(Error::validation("prior.where_std", "must be positive"));
        }
        if !(self.depth_std > 0.0) {
            return Err(Error::validation("prior.depth_std", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_recon: f64,
    pub alpha_overlap: f64,
    pub alpha_pres: f64,
    pub alpha_where: f64,
    pub alpha_depth: f64,
    pub alpha_cat: f64,
    pub alpha_what: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_recon: 8.0,
            alpha_overlap: 2.0,
            alpha_pres: 1.0,
            alpha_where: 1.0,
            alpha_depth: 1.0,
            alpha_cat: 1.0,
            alpha_what: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha_recon: 0.0,
            alpha_overlap: 0.0,
            alpha_pres: 0.0,
            alpha_where: 0.0,
            alpha_depth: 0.0,
            alpha_cat: 0.0,
            alpha_what: 0.0,
        }
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut f64); 7] {
        [
            ("alpha_recon", &mut self.alpha_recon),
            ("alpha_overlap", &mut self.alpha_overlap),
            ("alpha_pres", &mut self.alpha_pres),
            ("alpha_where", &mut self.alpha_where),
            ("alpha_depth", &mut self.alpha_depth),
            ("alpha_cat", &mut self.alpha_cat),
            ("alpha_what", &mut self.alpha_what),
        ]
    }

    /// Mutable access to a weight by its field name.
    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut f64> {
        self.fields_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v)
    }

    pub fn validate(&self) -> Result<()> {
        let mut copy = self.clone();
        for (name, v) in copy.fields_mut() {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(
                    &format!("loss.{name}"),
                    "must be a finite nonnegative number",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    /// Geometric interpolation; both endpoints must be positive.
    Exponential,
}

/// A value ramped between two endpoints over a step interval.
///
/// A schedule named `pres_prior` drives the presence prior; a schedule named
/// after a loss weight (e.g. `alpha_overlap`) replaces that weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub name: String,
    pub start_value: f64,
    pub end_value: f64,
    pub start_step: u64,
    pub end_step: u64,
    pub interpolation: Interpolation,
}

impl Schedule {
    pub fn value(&self, step: u64) -> f64 {
        if step <= self.start_step {
            return self.start_value;
        }
        if step >= self.end_step {
            return self.end_value;
        }
        let t = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        match self.interpolation {
            Interpolation::Linear => self.start_value + t * (self.end_value - self.start_value),
            Interpolation::Exponential => {
                let ratio = self.end_value / self.start_value;
                self.start_value * ratio.powf(t)
            }
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let key = format!("schedules[{index}]");
        if self.end_step < self.start_step {
            return Err(Error::validation(
                &format!("{key}.end_step"),
                "must not precede start_step",
            ));
        }
        if !self.start_value.is_finite() || !self.end_value.is_finite() {
            return Err(Error::validation(&key, "endpoints must be finite"));
        }
        if self.interpolation == Interpolation::Exponential
            && !(self.start_value > 0.0 && self.end_value > 0.0)
        {
            return Err(Error::validation(
                &format!("{key}.interpolation"),
                "exponential schedules need positive endpoints",
            ));
        }
        Ok(())
    }
}

/// `schedule_value` as a free function.
pub fn schedule_value(s: &Schedule, step: u64) -> f64 {
    s.value(step)
}

fn default_schedules() -> Vec<Schedule> {
    vec![
        Schedule {
            name: PRES_PRIOR_SCHEDULE.to_string(),
            start_value: 1.0,
            end_value: 6e-6,
            start_step: 0,
            end_step: 10_000,
            interpolation: Interpolation::Exponential,
        },
        Schedule {
            name: "alpha_overlap".to_string(),
            start_value: 2.0,
            end_value: 0.0,
            start_step: 0,
            end_step: 10_000,
            interpolation: Interpolation::Linear,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_mult_encoder: f64,
    pub lr_mult_decoder: f64,
    /// Multiplier for the mixture means and scales.
    pub lr_mult_prior: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub total_steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub seed: u64,
    /// `f32` or `f64`.
    pub dtype: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            lr_mult_encoder: 1.0,
            lr_mult_decoder: 1.0,
            lr_mult_prior: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            total_steps: 10_000,
            log_every: 100,
            checkpoint_every: 5_000,
            eval_every: 10_000,
            seed: 0,
            dtype: "f32".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(Error::validation(
                "train.dtype",
                format!("expected f32 or f64, got {other}"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("train.learning_rate", "must be positive"));
        }
        for (key, v) in [
            ("train.lr_mult_encoder", self.lr_mult_encoder),
            ("train.lr_mult_decoder", self.lr_mult_decoder),
            ("train.lr_mult_prior", self.lr_mult_prior),
            ("train.grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0) {
                return Err(Error::validation(key, "must be nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("train.beta1", "betas must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("train.log_every", "must be at least 1"));
        }
        self.dtype()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Cells below this presence probability are not reported.
    pub pres_threshold: f64,
    /// Decoded alpha above this value counts as object support.
    pub alpha_threshold: f64,
    /// Refine boxes to the decoded alpha support before scoring.
    pub refine_boxes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            pres_threshold: 0.5,
            alpha_threshold: 0.1,
            refine_boxes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub loss: LossWeights,
    pub schedules: Vec<Schedule>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prior: PriorConfig::default(),
            loss: LossWeights::default(),
            schedules: default_schedules(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        for (i, s) in self.schedules.iter().enumerate() {
            s.validate(i)?;
            if s.name != PRES_PRIOR_SCHEDULE && self.loss.clone().by_name_mut(&s.name).is_none() {
                return Err(Error::validation(
                    &format!("schedules[{i}].name"),
                    format!("`{}` is neither `pres_prior` nor a loss weight", s.name),
                ));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, name: &str) -> Option<&Schedule> {
        self.schedules.iter().find(|s| s.name == name)
    }

    /// Presence prior at `step`, after applying its schedule.
    pub fn pres_prior_at(&self, step: u64) -> f64 {
        self.schedule(PRES_PRIOR_SCHEDULE)
            .map_or(self.prior.pres_prob, |s| s.value(step))
    }

    /// Loss weights at `step`, after applying every weight schedule.
    pub fn weights_at(&self, step: u64) -> LossWeights {
        let mut w = self.loss.clone();
        for s in &self.schedules {
            if let Some(v) = w.by_name_mut(&s.name) {
                *v = s.value(step);
            }
        }
        w
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
            key: e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "<document>".to_string()),
            message: e.message().to_string(),
        })?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(
            |e| Error::Config {
                key: e.path().to_string(),
                message: e.inner().to_string(),
            },
        )?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a config file; an empty file gives the base hyperparameters.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    load_config_with(path, &[])
}

pub fn load_config_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_toml_str(&text, overrides)
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov.split_once('=').ok_or_else(|| Error::Config {
        key: ov.to_string(),
        message: "override must look like section.key=value".to_string(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config {
        key: key.to_string(),
        message: "empty key".to_string(),
    })?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.to_string(),
            message: format!("`{part}` is not a section"),
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
