//! In-memory RGB images and the pixel-level operations the pipeline needs:
//! bilinear resize, axis flips, aligned crops and tensor conversion.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major as `(height, width, 3)`.
//! Every operation preserves that range, so downstream code never re-clamps.

use crate::error::{CoreError, Result};
use crate::tape::Arr;
use ndarray::IxDyn;
use rand::Rng;

/// An RGB image with `f64` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

/// The aligned window used by [`paired_random_crop`]; reported so callers can
/// log or reproduce the exact patch that was sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Image {
    /// Builds an image from row-major interleaved RGB samples.
    ///
    /// Fails with [`CoreError::Shape`] if `data.len() != h * w * 3` or either
    /// dimension is zero, and with [`CoreError::Range`] if any sample is
    /// outside `[0, 1]` or non-finite.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::Shape(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(CoreError::Shape(format!(
                "expected {} samples for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(CoreError::Range(format!(
                "image samples must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self { data, height, width })
    }

    /// A black image of the given size.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: vec![0.0; height * width * 3], height, width }
    }

    /// Builds an image by evaluating `f(y, x) -> [r, g, b]` at every pixel.
    /// Samples are clamped to `[0, 1]`.
    pub fn from_fn<F: FnMut(usize, usize) -> [f64; 3]>(
        height: usize,
        width: usize,
        mut f: F,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data.push(px[c].clamp(0.0, 1.0));
                }
            }
        }
        Self { data, height, width }
    }

    /// Decodes 8-bit interleaved RGB into the unit range (`v / 255`).
    pub fn from_u8_rgb(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(CoreError::Shape(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|b| f64::from(*b) / 255.0).collect();
        Ok(Self { data, height, width })
    }

    /// Quantizes back to 8-bit RGB with round-half-up (`round(v * 255)`).
    pub fn to_u8_rgb(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major interleaved samples.
    pub fn samples(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    /// The `[r, g, b]` triple at `(y, x)`. Panics if out of bounds.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Sets the pixel at `(y, x)`, clamping each sample to `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = self.idx(y, x);
        for c in 0..3 {
            self.data[i + c] = px[c].clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`) and
    /// clamp-to-edge sampling. Output values stay in `[0, 1]` because they
    /// are convex combinations of inputs.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 {
            return Err(CoreError::Shape(format!(
                "resize target must be positive, got {out_h}x{out_w}"
            )));
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = Image::zeros(out_h, out_w);
        for oy in 0..out_h {
            let fy = (oy as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            let y0c = (y0 as isize).clamp(0, self.height as isize - 1) as usize;
            let y1c = (y0 as isize + 1).clamp(0, self.height as isize - 1) as usize;
            for ox in 0..out_w {
                let fx = (ox as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let x0c = (x0 as isize).clamp(0, self.width as isize - 1) as usize;
                let x1c = (x0 as isize + 1).clamp(0, self.width as isize - 1) as usize;
                let p00 = self.pixel(y0c, x0c);
                let p01 = self.pixel(y0c, x1c);
                let p10 = self.pixel(y1c, x0c);
                let p11 = self.pixel(y1c, x1c);
                let mut px = [0.0; 3];
                for c in 0..3 {
                    let top = p00[c] * (1.0 - tx) + p01[c] * tx;
                    let bot = p10[c] * (1.0 - tx) + p11[c] * tx;
                    px[c] = top * (1.0 - ty) + bot * ty;
                }
                out.set_pixel(oy, ox, px);
            }
        }
        Ok(out)
    }

    /// Mirrors the image along the requested axes.
    pub fn flip(&self, horizontal: bool, vertical: bool) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            let sy = if vertical { self.height - 1 - y } else { y };
            let sx = if horizontal { self.width - 1 - x } else { x };
            self.pixel(sy, sx)
        })
    }

    /// Extracts the window described by `spec`.
    pub fn crop(&self, spec: CropSpec) -> Result<Image> {
        if spec.height == 0
            || spec.width == 0
            || spec.top + spec.height > self.height
            || spec.left + spec.width > self.width
        {
            return Err(CoreError::Shape(format!(
                "crop {spec:?} does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(spec.height, spec.width, |y, x| {
            self.pixel(spec.top + y, spec.left + x)
        }))
    }

    /// Converts to a `(3, H, W)` tensor.
    pub fn to_chw(&self) -> Arr {
        let mut out = Arr::zeros(IxDyn(&[3, self.height, self.width]));
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(y, x);
                for c in 0..3 {
                    out[[c, y, x]] = px[c];
                }
            }
        }
        out
    }

    /// Builds an image from a `(3, H, W)` tensor, clamping samples to `[0, 1]`.
    ///
    /// Fails with [`CoreError::Numerical`] if any value is non-finite.
    pub fn from_chw(t: &Arr) -> Result<Image> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::Shape(format!(
                "expected a (3, H, W) tensor, got {shape:?}"
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(
                "tensor contains non-finite values".into(),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        Ok(Image::from_fn(h, w, |y, x| {
            [t[[0, y, x]], t[[1, y, x]], t[[2, y, x]]]
        }))
    }
}

/// Stacks images of identical size into a `(B, 3, H, W)` batch tensor.
pub fn batch_from_images(images: &[Image]) -> Result<Arr> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Shape("cannot batch zero images".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(CoreError::Shape(
            "all images in a batch must share dimensions".into(),
        ));
    }
    let mut out = Arr::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (b, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let px = img.pixel(y, x);
                for c in 0..3 {
                    out[[b, c, y, x]] = px[c];
                }
            }
        }
    }
    Ok(out)
}

/// Splits a `(B, 3, H, W)` batch back into images, clamping to `[0, 1]`.
pub fn images_from_batch(batch: &Arr) -> Result<Vec<Image>> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::Shape(format!(
            "expected a (B, 3, H, W) tensor, got {shape:?}"
        )));
    }
    (0..shape[0])
        .map(|b| {
            let view = batch.index_axis(ndarray::Axis(0), b).to_owned();
            Image::from_chw(&view)
        })
        .collect()
}

/// Samples one crop window and applies it to both images, keeping them
/// pixel-aligned. Fails if the images differ in size or are smaller than
/// `size` on either axis.
pub fn paired_random_crop<R: Rng>(
    a: &Image,
    b: &Image,
    size: usize,
    rng: &mut R,
) -> Result<(Image, Image, CropSpec)> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(CoreError::Shape(format!(
            "paired crop requires equal sizes, got {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if size == 0 || size > a.height() || size > a.width() {
        return Err(CoreError::Shape(format!(
            "crop size {size} does not fit a {}x{} image",
            a.height(),
            a.width()
        )));
    }
    let top = rng.gen_range(0..=a.height() - size);
    let left = rng.gen_range(0..=a.width() - size);
    let spec = CropSpec { top, left, height: size, width: size };
    Ok((a.crop(spec)?, b.crop(spec)?, spec))
}
