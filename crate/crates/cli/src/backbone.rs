//! Builds (or reloads) the frozen perceptual backbone for a run.
//!
//! The backbone is a small quality classifier fitted once per run directory
//! and cached as `backbone.ckpt`. Training images come from a quality
//! manifest when one exists; otherwise labeled examples are synthesized from
//! clear images via the parametric haze model (original = good, mild haze =
//! usable, severe haze = reject).

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io;
use crate::toy;
use catintell_core::baseline::{degrade, Severity};
use catintell_core::image::{batch_from_images, Image};
use catintell_core::perceptual::FeatureExtractor;
use catintell_core::rng;
use std::path::{Path, PathBuf};

pub const CACHE_NAME: &str = "backbone.ckpt";
const PHASE: &str = "backbone";

/// Returns the run's frozen feature extractor, fitting and caching it on
/// first use. `quality_manifest` points at a TSV of `path<TAB>label` rows;
/// `clear_images` is the fallback source when no manifest is available.
pub fn ensure_backbone(
    rc: &RunConfig,
    quality_manifest: Option<&Path>,
    clear_images: &[PathBuf],
    run_dir: &Path,
) -> Result<FeatureExtractor> {
    let cache = run_dir.join(CACHE_NAME);
    if cache.is_file() {
        return load_cached(rc, &cache);
    }

    let side = rc.train.patch;
    let (images, labels) = match quality_manifest {
        Some(manifest) => labeled_from_manifest(manifest, rc.backbone_image_count, side)?,
        None => labeled_from_clear(clear_images, rc.backbone_image_count, side)?,
    };
    if images.is_empty() {
        return Err(AppError::Config("no images available to fit the backbone".into()));
    }

    let mut rng = rng::derive(rc.seed, "backbone");
    let mut extractor = FeatureExtractor::build(rc.backbone.clone(), &mut rng)?;
    let batch = batch_from_images(&images)?;
    extractor.fit(
        &batch,
        &labels,
        rc.backbone_epochs,
        rc.backbone_batch,
        rc.backbone_lr,
        &mut rng,
    )?;

    io::ensure_dir(run_dir)?;
    let container = Container {
        phase: PHASE.into(),
        step: 0,
        opt_g_steps: 0,
        opt_d_steps: 0,
        config: rc.clone(),
        rng,
        arrays: extractor
            .params()
            .iter()
            .map(|(name, value)| (format!("backbone.{name}"), value.clone()))
            .collect(),
    };
    container.save(&cache)?;
    Ok(extractor)
}

fn load_cached(rc: &RunConfig, cache: &Path) -> Result<FeatureExtractor> {
    let container = Container::load(cache)?;
    if container.phase != PHASE {
        return Err(AppError::Phase { expected: PHASE.into(), found: container.phase });
    }
    if container.config.backbone != rc.backbone {
        return Err(AppError::Checkpoint(format!(
            "{} was fitted with a different backbone configuration",
            cache.display()
        )));
    }
    let mut rng = rng::derive(rc.seed, "backbone");
    let mut extractor = FeatureExtractor::build(rc.backbone.clone(), &mut rng)?;
    for i in 0..extractor.params().len() {
        let name = format!("backbone.{}", extractor.params().name(i));
        let value = container
            .array(&name)
            .ok_or_else(|| AppError::Checkpoint(format!("missing array {name}")))?;
        extractor.params_mut().set_value(i, value.clone())?;
    }
    extractor.freeze();
    Ok(extractor)
}

fn labeled_from_manifest(
    manifest: &Path,
    cap: usize,
    side: usize,
) -> Result<(Vec<Image>, Vec<usize>)> {
    let rows = toy::read_quality_manifest(manifest)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (path, label) in rows.into_iter().take(cap) {
        images.push(io::load_image(&path)?.resize(side, side)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Synthesizes a three-class training set from clear images alone: the
/// original counts as good, a mild haze as usable, a severe haze as reject.
fn labeled_from_clear(
    clear_images: &[PathBuf],
    cap: usize,
    side: usize,
) -> Result<(Vec<Image>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    'outer: for path in clear_images {
        let hq = io::load_image(path)?.resize(side, side)?;
        for (variant, label) in [
            (hq.clone(), toy::label_index("good")),
            (degrade(&hq, &Severity::Mild.params())?, toy::label_index("usable")),
            (degrade(&hq, &Severity::Severe.params())?, toy::label_index("reject")),
        ] {
            images.push(variant);
            labels.push(label.expect("built-in label"));
            if images.len() >= cap {
                break 'outer;
            }
        }
    }
    Ok((images, labels))
}
