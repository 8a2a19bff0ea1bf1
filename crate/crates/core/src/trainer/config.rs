use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::optim::AdamWConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::{DecoderKind, ModelConfig, TargetStrategy};

/// Where training images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Dir(PathBuf),
}

/// Every knob of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    /// Cells per image side.
    pub grid: usize,
    /// Pixels between neighbouring cells' patches (0 = contiguous grid).
    pub gap: usize,
    pub mask_ratio: f64,
    pub target_strategy: TargetStrategy,
    pub target_depth: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 256; the effective rate scales linearly.
    pub base_lr: f64,
    pub augment: bool,
    pub min_crop_area: f64,
    pub pool_k: usize,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::vit_tiny_lab();
        TrainConfig {
            preset: "custom".into(),
            seed: 0,
            data: DataSource::Synthetic(SynthSpec::default()),
            target_depth: model.depth,
            model,
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            grid: 8,
            gap: 0,
            mask_ratio: 0.75,
            target_strategy: TargetStrategy::Momentum,
            momentum: 0.996,
            epochs: 8,
            warmup_epochs: 1,
            batch_size: 32,
            base_lr: 1.5e-4,
            augment: true,
            min_crop_area: 0.2,
            pool_k: 10,
            checkpoint_every: 0,
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidKey {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

/// Keys of the config file, in serialization order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "data",
    "synth_classes",
    "synth_count",
    "synth_side",
    "synth_seed",
    "patch_size",
    "channels",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "decoder",
    "decoder_depth",
    "visual_cues",
    "projector",
    "projector_hidden",
    "grid",
    "gap",
    "mask_ratio",
    "target_strategy",
    "target_depth",
    "momentum",
    "loss",
    "huber_delta",
    "tau",
    "lambda_r",
    "gamma_start",
    "gamma_end",
    "infonce_sign",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "augment",
    "min_crop_area",
    "pool_k",
    "checkpoint_every",
];

/// Keys that fix the model's parameter shapes; they make up the checkpoint
/// digest.
pub const SHAPE_KEYS: &[&str] = &[
    "patch_size",
    "channels",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "decoder",
    "decoder_depth",
    "projector",
    "projector_hidden",
    "target_strategy",
];

impl TrainConfig {
    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Dir(_) => Err(invalid(key, "only meaningful with data=synthetic")),
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "data" => {
                self.data = if v == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic(s) => DataSource::Synthetic(*s),
                        DataSource::Dir(_) => DataSource::Synthetic(SynthSpec::default()),
                    }
                } else {
                    DataSource::Dir(PathBuf::from(v))
                }
            }
            "synth_classes" => self.synth_mut(key)?.classes = parse_num(key, v)?,
            "synth_count" => self.synth_mut(key)?.count = parse_num(key, v)?,
            "synth_side" => self.synth_mut(key)?.side = parse_num(key, v)?,
            "synth_seed" => self.synth_mut(key)?.seed = parse_num(key, v)?,
            "patch_size" => self.model.patch_size = parse_num(key, v)?,
            "channels" => self.model.channels = parse_num(key, v)?,
            "dim" => self.model.dim = parse_num(key, v)?,
            "depth" => self.model.depth = parse_num(key, v)?,
            "heads" => self.model.heads = parse_num(key, v)?,
            "mlp_ratio" => self.model.mlp_ratio = parse_num(key, v)?,
            "decoder" => {
                self.model.decoder_kind =
                    DecoderKind::parse(v).ok_or_else(|| invalid(key, format!("expected self_attention or cross_attention, got `{v}`")))?
            }
            "decoder_depth" => self.model.decoder_depth = parse_num(key, v)?,
            "visual_cues" => self.model.visual_cues = parse_bool(key, v)?,
            "projector" => self.model.projector = parse_bool(key, v)?,
            "projector_hidden" => self.model.projector_hidden = parse_num(key, v)?,
            "grid" => self.grid = parse_num(key, v)?,
            "gap" => self.gap = parse_num(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_num(key, v)?,
            "target_strategy" => {
                self.target_strategy = TargetStrategy::parse(v).ok_or_else(|| {
                    invalid(key, format!("expected standalone, shared_stopgrad, momentum or shared_joint, got `{v}`"))
                })?
            }
            "target_depth" => self.target_depth = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "loss" => {
                self.loss.kind = LossKind::parse(v).ok_or_else(|| invalid(key, format!("expected l2, l1, huber or patch_disc, got `{v}`")))?
            }
            "huber_delta" => self.loss.delta = parse_num(key, v)?,
            "tau" => self.loss.tau = parse_num(key, v)?,
            "lambda_r" => self.loss.lambda_r = parse_num(key, v)?,
            "gamma_start" => self.loss.gamma_start = parse_num(key, v)?,
            "gamma_end" => self.loss.gamma_end = parse_num(key, v)?,
            "infonce_sign" => self.loss.infonce_sign = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "base_lr" => self.base_lr = parse_num(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "beta1" => self.optim.beta1 = parse_num(key, v)?,
            "beta2" => self.optim.beta2 = parse_num(key, v)?,
            "adam_eps" => self.optim.eps = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "min_crop_area" => self.min_crop_area = parse_num(key, v)?,
            "pool_k" => self.pool_k = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Value of `key` in file form.
    pub fn get(&self, key: &str) -> Option<String> {
        let synth = match &self.data {
            DataSource::Synthetic(s) => Some(*s),
            DataSource::Dir(_) => None,
        };
        Some(match key {
            "preset" => self.preset.clone(),
            "seed" => self.seed.to_string(),
            "data" => match &self.data {
                DataSource::Synthetic(_) => "synthetic".into(),
                DataSource::Dir(p) => p.display().to_string(),
            },
            "synth_classes" => synth?.classes.to_string(),
            "synth_count" => synth?.count.to_string(),
            "synth_side" => synth?.side.to_string(),
            "synth_seed" => synth?.seed.to_string(),
            "patch_size" => self.model.patch_size.to_string(),
            "channels" => self.model.channels.to_string(),
            "dim" => self.model.dim.to_string(),
            "depth" => self.model.depth.to_string(),
            "heads" => self.model.heads.to_string(),
            "mlp_ratio" => self.model.mlp_ratio.to_string(),
            "decoder" => self.model.decoder_kind.as_str().into(),
            "decoder_depth" => self.model.decoder_depth.to_string(),
            "visual_cues" => self.model.visual_cues.to_string(),
            "projector" => self.model.projector.to_string(),
            "projector_hidden" => self.model.projector_hidden.to_string(),
            "grid" => self.grid.to_string(),
            "gap" => self.gap.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "target_strategy" => self.target_strategy.as_str().into(),
            "target_depth" => self.target_depth.to_string(),
            "momentum" => self.momentum.to_string(),
            "loss" => self.loss.kind.as_str().into(),
            "huber_delta" => self.loss.delta.to_string(),
            "tau" => self.loss.tau.to_string(),
            "lambda_r" => self.loss.lambda_r.to_string(),
            "gamma_start" => self.loss.gamma_start.to_string(),
            "gamma_end" => self.loss.gamma_end.to_string(),
            "infonce_sign" => self.loss.infonce_sign.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.eps.to_string(),
            "augment" => self.augment.to_string(),
            "min_crop_area" => self.min_crop_area.to_string(),
            "pool_k" => self.pool_k.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Parses a `key = value` document on top of the defaults (or of the
    /// preset named by a `preset` line, which must come first).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" && first && v != "custom" {
                cfg = super::presets::preset(v)?;
            } else {
                cfg.set(k, v)?;
            }
            first = false;
        }
        Ok(cfg)
    }

    /// Complete file form, every key present.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    /// SHA-256 over the shape-determining keys.
    pub fn model_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for key in SHAPE_KEYS {
            h.update(key.as_bytes());
            h.update(b"=");
            h.update(self.get(key).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    /// Pixel side of the working canvas.
    pub fn canvas(&self) -> usize {
        self.grid * (self.model.patch_size + self.gap)
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(invalid("warmup_epochs", format!("must be below epochs ({})", self.epochs)));
        }
        if self.grid == 0 {
            return Err(invalid("grid", "must be at least 1"));
        }
        crate::patching::split_sizes(self.grid * self.grid, self.mask_ratio)?;
        if self.target_depth > self.model.depth {
            return Err(invalid("target_depth", format!("{} exceeds depth {}", self.target_depth, self.model.depth)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid("momentum", format!("must lie in [0, 1], got {}", self.momentum)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(invalid("base_lr", "must be non-negative"));
        }
        if !(self.min_crop_area > 0.0 && self.min_crop_area <= 1.0) {
            return Err(invalid("min_crop_area", "must lie in (0, 1]"));
        }
        if self.pool_k == 0 || self.pool_k > self.grid * self.grid {
            return Err(invalid("pool_k", format!("must lie in 1..={}", self.grid * self.grid)));
        }
        Ok(())
    }
}
