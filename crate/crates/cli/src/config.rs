//! The run configuration: one TOML document covering both model shapes, the
//! training schedule, and the perceptual-backbone fit, with two built-in
//! profiles and CLI-flag > config-file > default precedence.

use crate::error::{AppError, Result};
use crate::io;
use catintell_core::discriminator::DiscriminatorConfig;
use catintell_core::generator::GeneratorConfig;
use catintell_core::perceptual::BackboneConfig;
use catintell_core::schedule::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Built-in hyper-parameter sets: `paper` is the published full-scale run,
/// `desk` shrinks everything so the whole pipeline finishes in minutes on one
/// CPU core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

/// Everything a run needs, serialized into checkpoints and snapshotted into
/// the run directory. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub train: TrainConfig,
    pub syn_generator: GeneratorConfig,
    pub res_generator: GeneratorConfig,
    pub syn_discriminator: DiscriminatorConfig,
    pub res_discriminator: DiscriminatorConfig,
    pub backbone: BackboneConfig,
    /// Epochs of quality-classifier training for the perceptual backbone.
    pub backbone_epochs: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    /// Cap on images used to fit the backbone.
    pub backbone_image_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-scale defaults: 4-stage/width-32 restoration model, 3-stage/
    /// width-16 synthesis model, 80k iterations at batch 8 on 256px patches.
    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            seed: 17,
            train: TrainConfig { seed: 17, ..TrainConfig::default() },
            syn_generator: GeneratorConfig::syn(),
            res_generator: GeneratorConfig::res(),
            syn_discriminator: DiscriminatorConfig::syn(),
            res_discriminator: DiscriminatorConfig::res(),
            backbone: BackboneConfig::default(),
            backbone_epochs: 6,
            backbone_batch: 8,
            backbone_lr: 1e-3,
            backbone_image_count: 240,
        }
    }

    /// Minutes-scale CPU preset: tiny models, 64px patches on 128px resizes,
    /// a few hundred iterations per phase.
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            train: TrainConfig {
                iterations: 800,
                batch: 2,
                lr_base: 1e-3,
                lr_finetune: 1e-4,
                warmup_iters: 20,
                seed: 17,
                patch: 64,
                resize_to: 128,
                checkpoint_every: 400,
                validate_every: 200,
                identity_batch: 1,
                finetune_iterations: 200,
                ..TrainConfig::default()
            },
            syn_generator: GeneratorConfig {
                stages: 2,
                width: 8,
                blocks_per_encoder_stage: 1,
                bottleneck_blocks: 1,
                kernel_large: 3,
                conv_groups: 8,
                ..GeneratorConfig::syn()
            },
            res_generator: GeneratorConfig {
                stages: 2,
                width: 8,
                blocks_per_encoder_stage: 1,
                bottleneck_blocks: 1,
                kernel_large: 3,
                conv_groups: 8,
                ..GeneratorConfig::res()
            },
            syn_discriminator: DiscriminatorConfig {
                stages: 2,
                embed_dim: 8,
                window: 4,
                heads_per_stage: vec![1, 2],
                ..DiscriminatorConfig::syn()
            },
            res_discriminator: DiscriminatorConfig {
                stages: 2,
                embed_dim: 8,
                window: 4,
                heads_per_stage: vec![1, 2],
                ..DiscriminatorConfig::res()
            },
            backbone: BackboneConfig { widths: vec![8, 16, 32], convs_per_block: 1, classes: 3 },
            backbone_epochs: 6,
            backbone_batch: 8,
            backbone_lr: 1e-3,
            backbone_image_count: 80,
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Cross-field checks beyond what each sub-config validates itself.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.syn_generator.validate()?;
        self.res_generator.validate()?;
        self.syn_discriminator.validate()?;
        self.res_discriminator.validate()?;
        self.backbone.validate()?;
        for (name, g) in [("syn", &self.syn_generator), ("res", &self.res_generator)] {
            if self.train.patch % g.divisor() != 0 {
                return Err(AppError::Config(format!(
                    "patch {} must divide by the {name} generator's downsampling factor {}",
                    self.train.patch,
                    g.divisor()
                )));
            }
        }
        if self.train.patch < self.backbone.min_side() {
            return Err(AppError::Config(format!(
                "patch {} is smaller than the backbone's minimum side {}",
                self.train.patch,
                self.backbone.min_side()
            )));
        }
        if self.backbone_epochs == 0 || self.backbone_batch == 0 || self.backbone_image_count == 0
        {
            return Err(AppError::Config(
                "backbone_epochs, backbone_batch and backbone_image_count must be positive".into(),
            ));
        }
        if !(self.backbone_lr > 0.0) {
            return Err(AppError::Config("backbone_lr must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the effective config: start from the profile's defaults
    /// (profile taken from the CLI flag, else the file, else `paper`), lay
    /// the file's keys over them, then apply CLI flag overrides.
    pub fn load(
        file: Option<&Path>,
        profile_flag: Option<Profile>,
        seed_flag: Option<u64>,
    ) -> Result<RunConfig> {
        let file_value: Option<toml::Value> = match file {
            Some(path) => {
                let text = io::read_to_string(path)?;
                Some(text.parse::<toml::Value>().map_err(|e| {
                    AppError::Config(format!("{}: {e}", path.display()))
                })?)
            }
            None => None,
        };

        let file_profile = match file_value.as_ref().and_then(|v| v.get("profile")) {
            None => None,
            Some(toml::Value::String(s)) => match s.as_str() {
                "paper" => Some(Profile::Paper),
                "desk" => Some(Profile::Desk),
                other => {
                    return Err(AppError::Config(format!(
                        "unknown profile {other:?} (expected \"paper\" or \"desk\")"
                    )))
                }
            },
            Some(_) => {
                return Err(AppError::Config("profile must be a string".into()));
            }
        };
        let profile = profile_flag.or(file_profile).unwrap_or(Profile::Paper);

        let mut doc = toml::Value::try_from(RunConfig::for_profile(profile))
            .expect("defaults serialize");
        if let Some(over) = file_value {
            merge_value(&mut doc, over);
        }
        let mut rc: RunConfig = doc
            .try_into()
            .map_err(|e| AppError::Config(e.to_string()))?;

        rc.profile = profile;
        if let Some(seed) = seed_flag {
            rc.seed = seed;
        }
        // One master seed: the schedule's copy always mirrors the top level.
        rc.train.seed = rc.seed;
        rc.validate()?;
        Ok(rc)
    }

    /// Serializes the effective config; written into every run directory.
    pub fn snapshot(&self, run_dir: &Path) -> Result<std::path::PathBuf> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| AppError::Config(format!("config serialization: {e}")))?;
        let path = run_dir.join("config.toml");
        io::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Recursively lays `over` on top of `base`: tables merge per key, any other
/// value (including arrays) replaces the base value.
fn merge_value(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
