//! Loss functions and the composite objectives of the two GAN phases.
//!
//! Both generators minimize the same four ingredients with different
//! emphasis: a smooth-L1 pixel anchor, a feature-perceptual term, a
//! smooth-L1 identity term and a BCE adversarial term. The degradation
//! generator leans on the perceptual term (the pixel anchor only keeps
//! content from drifting), while the restoration generator is pixel-first.

use crate::error::{CoreError, Result};
use crate::tape::Arr;
use serde::{Deserialize, Serialize};

/// Clamp bound for probabilities inside the BCE, keeping logs finite.
pub const BCE_EPS: f64 = 1e-7;

/// Weights of the composite generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub fp: f64,
    pub identity: f64,
    pub gan: f64,
}

impl LossWeights {
    /// Degradation-synthesis phase: perceptual-dominant.
    pub fn syn() -> Self {
        LossWeights { pixel: 0.01, fp: 1.0, identity: 0.1, gan: 0.1 }
    }

    /// Restoration phase: pixel-dominant.
    pub fn res() -> Self {
        LossWeights { pixel: 1.0, fp: 0.1, identity: 0.01, gan: 0.1 }
    }
}

/// One step's loss components, before and after weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Unweighted smooth-L1 pixel term.
    pub pixel: f64,
    /// Unweighted feature-difference half of the perceptual term.
    pub fp: f64,
    /// Unweighted Gram-matrix (style) half of the perceptual term.
    pub fp_style: f64,
    /// Unweighted identity term.
    pub identity: f64,
    /// Unweighted adversarial term.
    pub gan: f64,
    /// The weighted sum actually optimized.
    pub total: f64,
}

/// Smooth L1 (Huber at delta 1) averaged over all elements.
pub fn smooth_l1(a: &Arr, b: &Arr) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape(format!(
            "smooth_l1 operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(CoreError::Shape("smooth_l1 on empty tensors".into()));
    }
    let mut acc = 0.0;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        acc += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    });
    Ok(acc / a.len() as f64)
}

/// Binary cross-entropy between predicted probabilities and targets, both
/// clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs.
///
/// Targets are usually hard labels; the soft-target mode feeds live
/// discriminator outputs on real images instead.
pub fn gan_bce(targets: &[f64], probs: &[f64]) -> Result<f64> {
    if targets.len() != probs.len() || targets.is_empty() {
        return Err(CoreError::Shape(format!(
            "gan_bce needs equal non-empty batches, got {} targets / {} predictions",
            targets.len(),
            probs.len()
        )));
    }
    if targets.iter().chain(probs).any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(CoreError::Range(
            "gan_bce expects probabilities in [0, 1]".into(),
        ));
    }
    let mut acc = 0.0;
    for (&t, &p) in targets.iter().zip(probs) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / targets.len() as f64)
}

/// Anything that maps an image batch to an image batch; lets the identity
/// loss run on real generators and on cheap test stubs alike.
pub trait ImageMapper {
    /// Unclamped forward pass on a `(B, 3, H, W)` batch.
    fn map_batch(&self, batch: &Arr) -> Result<Arr>;
}

/// How far the mapper is from a no-op on `batch`:
/// `smooth_l1(batch, map(batch))`.
pub fn identity_loss<M: ImageMapper>(mapper: &M, batch: &Arr) -> Result<f64> {
    let mapped = mapper.map_batch(batch)?;
    smooth_l1(batch, &mapped)
}

/// Folds unweighted components into a [`LossReport`] using `weights`; the
/// style half joins the feature half inside the perceptual slot with its own
/// `style_weight` multiplier.
///
/// Fails with [`CoreError::Numerical`] if any component or the total is
/// non-finite, so a diverging run stops at the step that produced it.
pub fn composite(
    pixel: f64,
    fp: f64,
    fp_style: f64,
    identity: f64,
    gan: f64,
    style_weight: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    let total = weights.pixel * pixel
        + weights.fp * (fp + style_weight * fp_style)
        + weights.identity * identity
        + weights.gan * gan;
    let report = LossReport { pixel, fp, fp_style, identity, gan, total };
    if [pixel, fp, fp_style, identity, gan, total].iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical(format!(
            "non-finite loss component: {report:?}"
        )));
    }
    Ok(report)
}
