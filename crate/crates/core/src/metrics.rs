//! Full-reference image quality metrics: PSNR and single-scale SSIM.
//!
//! Both operate on unit-range RGB [`Image`]s. SSIM uses the standard 11x11
//! Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, is
//! evaluated per channel on valid windows only (no padding) and the three
//! channel scores are averaged.

use crate::error::{CoreError, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// PSNR reported for a zero-MSE pair; also the overall cap.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::Shape(format!(
            "metric operands differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.samples().len() as f64;
    let sum: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB for unit-range images
/// (`10 * log10(1 / MSE)`), capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Separable valid-mode Gaussian filter of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass: (h, ow).
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * plane[y * w + ox + k];
            }
            tmp[y * ow + ox] = acc;
        }
    }
    // Vertical pass: (oh, ow).
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * tmp[(oy + k) * ow + ox];
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Single-scale SSIM averaged over the three channels.
///
/// Requires both images to share dimensions of at least 11x11; smaller inputs
/// fail with [`CoreError::Shape`] because no valid window exists.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut channel_scores = [0.0; 3];
    for (c, score) in channel_scores.iter_mut().enumerate() {
        let n = h * w;
        let mut pa = vec![0.0; n];
        let mut pb = vec![0.0; n];
        let mut paa = vec![0.0; n];
        let mut pbb = vec![0.0; n];
        let mut pab = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let va = a.pixel(y, x)[c];
                let vb = b.pixel(y, x)[c];
                let i = y * w + x;
                pa[i] = va;
                pb[i] = vb;
                paa[i] = va * va;
                pbb[i] = vb * vb;
                pab[i] = va * vb;
            }
        }
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&paa, h, w, &g);
        let e_bb = filter_valid(&pbb, h, w, &g);
        let e_ab = filter_valid(&pab, h, w, &g);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        *score = acc / mu_a.len() as f64;
    }
    Ok((channel_scores[0] + channel_scores[1] + channel_scores[2]) / 3.0)
}
