//! Two-stage training orchestration: configuration, learning-rate schedule,
//! checkpointing, and the stage loops with their freeze contracts.

mod checkpoint;
mod stages;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use stages::{
    frozen_text_features, latent_diversity, train_stage1, train_stage2, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::spectral::MaskParams;

/// Full training configuration. Serialized verbatim into every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// K: expert count.
    pub experts: usize,
    /// P identities and M instances per identity per batch.
    pub p: usize,
    pub m: usize,
    /// MEKA aggregate weights (camera, reconstruction, adversarial).
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Stage-2 aggregate weights (identity, visual-text matching).
    pub alpha1: f64,
    pub alpha2: f64,
    pub base_lr: f64,
    pub warmup_lr_start: f64,
    pub warmup_lr_end: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    /// Spectral preprocessing toggle: DII in stage 1 and SPI in stage 2 when
    /// on, raw images in both stages when off (ablation).
    pub stream: bool,
    /// Backbone selector; only the built-in "toy" dual encoder ships here.
    pub backbone: String,
    pub encoder: EncoderConfig,
    pub mask: MaskParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            experts: 2,
            p: 16,
            m: 4,
            lambda1: 0.1,
            lambda2: 10.0,
            lambda3: 0.2,
            alpha1: 0.25,
            alpha2: 1.8,
            base_lr: 3.5e-4,
            warmup_lr_start: 5.0e-7,
            warmup_lr_end: 5.0e-6,
            warmup_frac: 0.1,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            epochs_stage1: 3,
            epochs_stage2: 5,
            seed: 0,
            stream: true,
            backbone: "toy".into(),
            encoder: EncoderConfig::default(),
            mask: MaskParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(Error::validation("experts must be >= 2"));
        }
        if self.p == 0 || self.m == 0 {
            return Err(Error::validation("p and m must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::validation("warmup_frac must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::validation("label_smoothing must lie in [0, 1)"));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::validation("epoch counts must be positive"));
        }
        if self.backbone != "toy" {
            return Err(Error::validation(format!(
                "unknown backbone {:?}; this build ships only \"toy\"",
                self.backbone
            )));
        }
        self.encoder.validate()
    }
}

/// Parses a flat `key = value` config file over [`TrainConfig::default`].
/// Blank lines and `#` comments are skipped; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::validation(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::validation(format!(
                "config line {}: {key} expects {what}, got {value:?}",
                lineno + 1
            ))
        };
        macro_rules! set {
            ($field:expr, $ty:ty, $what:expr) => {
                $field = value.parse::<$ty>().map_err(|_| bad($what))?
            };
        }
        match key {
            "experts" => set!(cfg.experts, usize, "an integer"),
            "prompt_len" => set!(cfg.encoder.prompt_len, usize, "an integer"),
            "p" => set!(cfg.p, usize, "an integer"),
            "m" => set!(cfg.m, usize, "an integer"),
            "lambda1" => set!(cfg.lambda1, f64, "a number"),
            "lambda2" => set!(cfg.lambda2, f64, "a number"),
            "lambda3" => set!(cfg.lambda3, f64, "a number"),
            "alpha1" => set!(cfg.alpha1, f64, "a number"),
            "alpha2" => set!(cfg.alpha2, f64, "a number"),
            "base_lr" => set!(cfg.base_lr, f64, "a number"),
            "warmup_lr_start" => set!(cfg.warmup_lr_start, f64, "a number"),
            "warmup_lr_end" => set!(cfg.warmup_lr_end, f64, "a number"),
            "warmup_frac" => set!(cfg.warmup_frac, f64, "a number"),
            "weight_decay" => set!(cfg.weight_decay, f64, "a number"),
            "label_smoothing" => set!(cfg.label_smoothing, f64, "a number"),
            "epochs_stage1" => set!(cfg.epochs_stage1, usize, "an integer"),
            "epochs_stage2" => set!(cfg.epochs_stage2, usize, "an integer"),
            "seed" => set!(cfg.seed, u64, "an integer"),
            "stream" => set!(cfg.stream, bool, "true or false"),
            "backbone" => cfg.backbone = value.to_string(),
            "image_size" => set!(cfg.encoder.image_size, usize, "an integer"),
            "patch" => set!(cfg.encoder.patch, usize, "an integer"),
            "dim" => set!(cfg.encoder.dim, usize, "an integer"),
            "heads" => set!(cfg.encoder.heads, usize, "an integer"),
            "image_blocks" => set!(cfg.encoder.image_blocks, usize, "an integer"),
            "text_blocks" => set!(cfg.encoder.text_blocks, usize, "an integer"),
            "mask_k1" => set!(cfg.mask.k1, f64, "a number"),
            "mask_k2" => set!(cfg.mask.k2, f64, "a number"),
            "mask_k3" => set!(cfg.mask.k3, f64, "a number"),
            other => {
                return Err(Error::validation(format!(
                    "config line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Linear warmup from `warmup_lr_start` to `warmup_lr_end` over the warmup
/// window, then cosine decay from `base_lr` to 0.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64 * cfg.warmup_frac).round() as usize).max(1);
    if step < warmup {
        let t = step as f64 / warmup as f64;
        cfg.warmup_lr_start + (cfg.warmup_lr_end - cfg.warmup_lr_start) * t
    } else {
        let span = (total - warmup).max(1) as f64;
        let t = (step - warmup) as f64 / span;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (0.1, 10.0, 0.2));
        assert_eq!((c.alpha1, c.alpha2), (0.25, 1.8));
        assert_eq!(c.base_lr, 3.5e-4);
        assert_eq!(c.warmup_lr_start, 5.0e-7);
        assert_eq!(c.warmup_lr_end, 5.0e-6);
        assert_eq!(c.label_smoothing, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_schedule(0, total, &cfg), 5.0e-7);
        // Warmup covers 100 steps; its last step is just under the end rate.
        let last_warm = lr_schedule(99, total, &cfg);
        assert!(last_warm <= 5.0e-6 && last_warm > 4.8e-6);
        // Midpoint of the cosine phase: half the base rate.
        let mid = lr_schedule(100 + 450, total, &cfg);
        assert!((mid - cfg.base_lr / 2.0).abs() / cfg.base_lr < 1e-8);
        assert!(lr_schedule(total, total, &cfg) <= 1e-9);
    }

    #[test]
    fn parse_overrides_and_rejects_unknown_keys() {
        let cfg = parse_config(
            "# desk scale\nexperts = 3\nimage_size = 32\nbase_lr = 1e-3\nstream = false\n",
        )
        .unwrap();
        assert_eq!(cfg.experts, 3);
        assert_eq!(cfg.encoder.image_size, 32);
        assert_eq!(cfg.base_lr, 1e-3);
        assert!(!cfg.stream);
        assert!(parse_config("bogus_key = 1\n").is_err());
        assert!(parse_config("experts = many\n").is_err());
        assert!(parse_config("experts 3\n").is_err());
        assert!(parse_config("backbone = resnet\n").is_err());
    }
}
