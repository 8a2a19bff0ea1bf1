use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{DecoderKind, TargetStrategy};

/// The challenge ladder. Each rung adds one remedy to the previous one.
pub const PRESETS: &[&str] = &[
    "naive",
    "no_weight_sharing",
    "shared_stopgrad",
    "momentum",
    "patchdisc",
    "mask90",
    "gap",
    "simreg",
    "challenge3-optimal",
    "crossattn",
    "cues",
    "projector",
    "full",
];

/// Desk-scale schedule shared by every preset.
fn base() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        warmup_epochs: 1,
        batch_size: 32,
        base_lr: 8e-3,
        ..TrainConfig::default()
    }
}

fn direct_l2(strategy: TargetStrategy) -> TrainConfig {
    let mut c = base();
    c.mask_ratio = 0.75;
    c.gap = 0;
    c.target_strategy = strategy;
    c.loss.kind = LossKind::L2;
    c.loss.lambda_r = 0.0;
    c.model.decoder_kind = DecoderKind::SelfAttention;
    c.model.decoder_depth = 3;
    c
}

pub fn preset(name: &str) -> Result<TrainConfig> {
    let mut c = match name {
        "naive" => direct_l2(TargetStrategy::SharedJoint),
        "no_weight_sharing" => direct_l2(TargetStrategy::Standalone),
        "shared_stopgrad" => direct_l2(TargetStrategy::SharedStopGrad),
        "momentum" => direct_l2(TargetStrategy::Momentum),
        "patchdisc" => {
            let mut c = preset("momentum")?;
            c.loss.kind = LossKind::PatchDisc;
            c
        }
        "mask90" => {
            let mut c = preset("patchdisc")?;
            c.mask_ratio = 0.9;
            c
        }
        "gap" => {
            let mut c = preset("mask90")?;
            c.gap = 2;
            c
        }
        "simreg" | "challenge3-optimal" => {
            let mut c = preset("gap")?;
            c.loss.lambda_r = 0.1;
            c
        }
        "crossattn" => {
            let mut c = preset("simreg")?;
            c.model.decoder_kind = DecoderKind::CrossAttention;
            c
        }
        "cues" => {
            let mut c = preset("crossattn")?;
            c.model.visual_cues = true;
            c
        }
        "projector" | "full" => {
            let mut c = preset("cues")?;
            c.model.projector = true;
            c
        }
        _ => {
            return Err(Error::config(format!(
                "unknown preset `{name}`; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    c.preset = name.to_string();
    Ok(c)
}
