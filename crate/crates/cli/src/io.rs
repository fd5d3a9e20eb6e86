//! Image file I/O (PNG/JPEG, 8-bit RGB) and small filesystem helpers.

use crate::error::{AppError, Result};
use catintell_core::image::Image;
use std::fs;
use std::path::{Path, PathBuf};

/// Raster extensions the pipeline ingests, matched case-insensitively.
pub const SUPPORTED_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.iter().any(|s| e.eq_ignore_ascii_case(s)))
        .unwrap_or(false)
}

/// Loads an 8-bit RGB image and rescales samples to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(AppError::NotFound(path.to_path_buf()));
    }
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => AppError::io(path, source),
        other => AppError::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_u8_rgb(h as usize, w as usize, rgb.as_raw())?)
}

/// Saves as 8-bit RGB; the format follows the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = img.to_u8_rgb();
    image::save_buffer(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(source) => AppError::io(path, source),
        other => AppError::io(path, std::io::Error::other(other.to_string())),
    })
}

/// All supported images directly inside `dir`, lexicographically sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(AppError::NotFound(dir.to_path_buf()));
    }
    let entries = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    out.sort();
    Ok(out)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

/// Writes through a temp file and renames, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(AppError::NotFound(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}
