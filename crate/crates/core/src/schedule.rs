//! Training hyper-parameters and the learning-rate schedule.
//!
//! The schedule is linear warmup from zero to `lr_base` over `warmup_iters`
//! steps, followed by decay to exactly zero at `iterations`: cosine-shaped
//! for main training, linear for the fine-tune pass.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Shape of the post-warmup decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Cosine,
    Linear,
}

/// Hyper-parameters for one training phase, serialized into checkpoints so a
/// run is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimization steps in the main phase.
    pub iterations: u64,
    /// Images per batch.
    pub batch: usize,
    /// Peak learning rate reached at the end of warmup.
    pub lr_base: f64,
    /// Peak learning rate of the fine-tune phase.
    pub lr_finetune: f64,
    /// Linear warmup length in steps.
    pub warmup_iters: u64,
    /// Post-warmup decay shape for the main phase.
    pub decay: Decay,
    pub beta1: f64,
    pub beta2: f64,
    /// Seed for weight init, data sampling and augmentation streams.
    pub seed: u64,
    /// Side length of the square training patches.
    pub patch: usize,
    /// Images are bilinearly resized to this side before patch sampling.
    pub resize_to: usize,
    /// Steps between checkpoint writes (also writes one at the end).
    pub checkpoint_every: u64,
    /// Steps between validation previews.
    pub validate_every: u64,
    /// Images per identity probe; 0 means the full batch.
    pub identity_batch: usize,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Use live discriminator outputs on real images as the generator's
    /// adversarial target instead of hard ones.
    pub soft_target: bool,
    /// Steps in the fine-tune phase.
    pub finetune_iterations: u64,
    /// Extra multiplier on the Gram-matrix (style) half of the feature loss.
    pub fp_style_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 80_000,
            batch: 8,
            lr_base: 1e-5,
            lr_finetune: 1e-6,
            warmup_iters: 1000,
            decay: Decay::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            patch: 256,
            resize_to: 768,
            checkpoint_every: 10_000,
            validate_every: 5000,
            identity_batch: 0,
            grad_clip: 1.0,
            soft_target: false,
            finetune_iterations: 20_000,
            fp_style_weight: 1.0,
        }
    }
}

impl TrainConfig {
    /// Checks the invariants other components rely on.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CoreError::Config("iterations must be positive".into()));
        }
        if self.warmup_iters >= self.iterations {
            return Err(CoreError::Config(format!(
                "warmup_iters ({}) must be smaller than iterations ({})",
                self.warmup_iters, self.iterations
            )));
        }
        if self.batch == 0 || self.patch == 0 || self.resize_to == 0 {
            return Err(CoreError::Config(
                "batch, patch and resize_to must be positive".into(),
            ));
        }
        if self.patch > self.resize_to {
            return Err(CoreError::Config(format!(
                "patch ({}) cannot exceed resize_to ({})",
                self.patch, self.resize_to
            )));
        }
        if !(self.lr_base > 0.0) || !(self.lr_finetune > 0.0) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(CoreError::Config(
                "checkpoint_every and validate_every must be positive".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) || !(self.fp_style_weight >= 0.0) {
            return Err(CoreError::Config(
                "grad_clip and fp_style_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The schedule of the fine-tune phase: the fine-tune rate with linear
    /// decay, no warmup.
    pub fn finetune_schedule(&self) -> Result<TrainConfig> {
        if self.finetune_iterations == 0 {
            return Err(CoreError::Config(
                "finetune_iterations must be positive to fine-tune".into(),
            ));
        }
        Ok(TrainConfig {
            iterations: self.finetune_iterations,
            lr_base: self.lr_finetune,
            warmup_iters: 0,
            decay: Decay::Linear,
            ..self.clone()
        })
    }
}

/// Learning rate at `step` (0-based, `step <= iterations`).
///
/// Warmup ramps linearly from 0 so that `lr_at(warmup_iters) == lr_base`
/// exactly; afterwards the rate decays to exactly 0 at `iterations`. Steps
/// beyond the horizon fail with [`CoreError::Range`].
pub fn lr_at(cfg: &TrainConfig, step: u64) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.iterations {
        return Err(CoreError::Range(format!(
            "step {} exceeds the training horizon {}",
            step, cfg.iterations
        )));
    }
    if step < cfg.warmup_iters {
        return Ok(cfg.lr_base * step as f64 / cfg.warmup_iters as f64);
    }
    let t = (step - cfg.warmup_iters) as f64 / (cfg.iterations - cfg.warmup_iters) as f64;
    Ok(match cfg.decay {
        Decay::Cosine => cfg.lr_base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        Decay::Linear => cfg.lr_base * (1.0 - t),
    })
}
