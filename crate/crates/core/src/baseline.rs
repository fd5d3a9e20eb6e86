//! Classical cataract-style degradation and a procedural toy fundus corpus.
//!
//! The degradation follows the scattering model used by traditional
//! simulation pipelines: the image is Gaussian-blurred, then mixed with a
//! uniform "atmospheric" light, `out = t * blur(img, sigma) + (1 - t) * A`.
//! Three named severity tiers provide increasingly strong presets.
//!
//! [`render_toy_fundus`] draws small synthetic retina-like images (circular
//! field of view, optic disc, vessel tree) so the full pipeline can be
//! exercised end to end without any clinical data.

use crate::error::{CoreError, Result};
use crate::image::Image;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the scattering degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Transmission factor in `[0, 1]`; 1 keeps the (blurred) image, 0
    /// replaces it entirely with the haze light.
    pub t: f64,
    /// Gaussian blur sigma in pixels; 0 disables the blur.
    pub sigma: f64,
    /// Haze light color, each channel in `[0, 1]`.
    pub light: [f64; 3],
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) || !self.t.is_finite() {
            return Err(CoreError::Range(format!(
                "transmission t must lie in [0, 1], got {}",
                self.t
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(CoreError::Range(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if self.light.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::Range(format!(
                "haze light must lie in [0, 1]^3, got {:?}",
                self.light
            )));
        }
        Ok(())
    }
}

/// Degradation strength presets, ordered from lightest to heaviest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Medium,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Medium, Severity::Severe];

    pub fn params(self) -> HazeParams {
        match self {
            Severity::Mild => HazeParams { t: 0.85, sigma: 0.8, light: [0.93, 0.91, 0.86] },
            Severity::Medium => HazeParams { t: 0.65, sigma: 1.8, light: [0.90, 0.88, 0.82] },
            Severity::Severe => HazeParams { t: 0.45, sigma: 3.2, light: [0.88, 0.85, 0.78] },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Medium => "medium",
            Severity::Severe => "severe",
        }
    }
}

/// Mirror-without-edge-repeat index for reflect padding.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with reflect padding. `sigma = 0` returns the
/// image unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CoreError::Range(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    // Horizontal pass.
    let mut tmp = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, tap) in taps.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - radius, w);
                let px = img.pixel(y, sx);
                for c in 0..3 {
                    acc[c] += tap * px[c];
                }
            }
            tmp.set_pixel(y, x, acc);
        }
    }
    // Vertical pass.
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, tap) in taps.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius, h);
                let px = tmp.pixel(sy, x);
                for c in 0..3 {
                    acc[c] += tap * px[c];
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    Ok(out)
}

/// Applies the scattering degradation `t * blur(img, sigma) + (1 - t) * A`.
pub fn degrade(img: &Image, params: &HazeParams) -> Result<Image> {
    params.validate()?;
    let blurred = gaussian_blur(img, params.sigma)?;
    Ok(Image::from_fn(img.height(), img.width(), |y, x| {
        let px = blurred.pixel(y, x);
        [
            params.t * px[0] + (1.0 - params.t) * params.light[0],
            params.t * px[1] + (1.0 - params.t) * params.light[1],
            params.t * px[2] + (1.0 - params.t) * params.light[2],
        ]
    }))
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(img: &mut Image, y: usize, x: usize, color: [f64; 3], alpha: f64) {
    let dst = img.pixel(y, x);
    img.set_pixel(
        y,
        x,
        [
            dst[0] * (1.0 - alpha) + color[0] * alpha,
            dst[1] * (1.0 - alpha) + color[1] * alpha,
            dst[2] * (1.0 - alpha) + color[2] * alpha,
        ],
    );
}

/// Stamps a soft disc of the given radius; used for vessel strokes.
fn stamp(img: &mut Image, cy: f64, cx: f64, radius: f64, color: [f64; 3], opacity: f64) {
    let r_out = radius + 1.0;
    let y0 = (cy - r_out).floor().max(0.0) as usize;
    let y1 = ((cy + r_out).ceil() as usize).min(img.height() - 1);
    let x0 = (cx - r_out).floor().max(0.0) as usize;
    let x1 = ((cx + r_out).ceil() as usize).min(img.width() - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let a = (1.0 - smoothstep(radius - 0.5, radius + 0.5, d)) * opacity;
            if a > 0.0 {
                blend(img, y, x, color, a);
            }
        }
    }
}

/// Renders one synthetic fundus-like image: orange circular field of view on
/// black, a bright optic disc, a random vessel tree and mild sensor noise.
/// Fully determined by the generator state.
pub fn render_toy_fundus<R: Rng>(size: usize, rng: &mut R) -> Result<Image> {
    if size < 32 {
        return Err(CoreError::Shape(format!(
            "toy fundus images need size >= 32, got {size}"
        )));
    }
    let s = size as f64;
    let center = s / 2.0;
    let fov_r = 0.47 * s;

    // Scene randomness is drawn up front so pixel evaluation stays pure.
    let base_jitter = rng.gen_range(-0.05..0.05);
    let warm_shift = rng.gen_range(-0.04..0.04);
    let disc_side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let disc_cy = center + rng.gen_range(-0.14..0.14) * fov_r;
    let disc_cx = center + disc_side * rng.gen_range(0.30..0.45) * fov_r;
    let disc_r = rng.gen_range(0.10..0.14) * s;

    let base = [0.80 + base_jitter, 0.42 + warm_shift, 0.17];
    let mut img = Image::from_fn(size, size, |y, x| {
        let dy = y as f64 - center;
        let dx = x as f64 - center;
        let d = (dy * dy + dx * dx).sqrt();
        if d > fov_r {
            return [0.015, 0.012, 0.012];
        }
        let rim = 1.0 - smoothstep(fov_r - 2.0, fov_r, d);
        let falloff = 1.0 - 0.45 * (d / fov_r).powi(2);
        let vignette = 1.0 - 0.30 * (d / fov_r).powi(4);
        let k = falloff * vignette * rim;
        // Optic disc: bright core with a soft rim.
        let dd = ((y as f64 - disc_cy).powi(2) + (x as f64 - disc_cx).powi(2)).sqrt();
        let disc = 1.0 - smoothstep(disc_r * 0.8, disc_r, dd);
        let disc_color = [0.96, 0.83, 0.55];
        [
            base[0] * k + (disc_color[0] - base[0] * k) * disc,
            base[1] * k + (disc_color[1] - base[1] * k) * disc,
            base[2] * k + (disc_color[2] - base[2] * k) * disc,
        ]
    });

    // Vessel tree: random walks out of the optic disc, tapering as they go.
    let vessel_color = [0.45, 0.11, 0.08];
    let n_vessels = rng.gen_range(5..9);
    for v in 0..n_vessels {
        let mut angle = std::f64::consts::TAU * (v as f64 + rng.gen_range(0.0..0.8)) / n_vessels as f64;
        let mut cy = disc_cy + angle.sin() * disc_r * 0.3;
        let mut cx = disc_cx + angle.cos() * disc_r * 0.3;
        let mut width = rng.gen_range(0.010..0.016) * s;
        let steps = (rng.gen_range(0.55..0.95) * s) as usize;
        for _ in 0..steps {
            angle += rng.gen_range(-0.22..0.22);
            cy += angle.sin() * 1.4;
            cx += angle.cos() * 1.4;
            let dy = cy - center;
            let dx = cx - center;
            if (dy * dy + dx * dx).sqrt() > fov_r - 1.5 {
                break;
            }
            stamp(&mut img, cy, cx, width.max(0.45), vessel_color, 0.8);
            width *= 0.995;
        }
    }

    // Mild sensor noise keeps the corpus from being piecewise-constant.
    let mut noisy = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let px = img.pixel(y, x);
            noisy.set_pixel(
                y,
                x,
                [
                    px[0] + rng.gen_range(-0.008..0.008),
                    px[1] + rng.gen_range(-0.008..0.008),
                    px[2] + rng.gen_range(-0.008..0.008),
                ],
            );
        }
    }
    Ok(noisy)
}
