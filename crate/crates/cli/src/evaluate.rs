//! Directory-against-directory image quality evaluation.
//!
//! Predictions and targets are matched by file name; any file without a
//! counterpart on the other side fails the run, so a silently incomplete
//! restoration cannot inflate its numbers.

use crate::error::{AppError, Result};
use crate::io;
use catintell_core::metrics::{psnr, ssim};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image rows (sorted by file name) plus their aggregate statistics.
/// Standard deviations are population standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub std_psnr: f64,
    pub std_ssim: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Scores every prediction against the same-named target image.
pub fn evaluate(pred_dir: &Path, target_dir: &Path) -> Result<EvalReport> {
    let preds = io::list_images(pred_dir)?;
    let targets = io::list_images(target_dir)?;
    if preds.is_empty() {
        return Err(AppError::EmptyCorpus(pred_dir.to_path_buf()));
    }

    let name_of = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let target_names: Vec<String> = targets.iter().map(name_of).collect();
    for (t, name) in targets.iter().zip(&target_names) {
        if !preds.iter().any(|p| p.file_name() == t.file_name()) {
            return Err(AppError::Pairing(name.clone()));
        }
    }

    let mut rows = Vec::with_capacity(preds.len());
    for pred_path in &preds {
        let name = name_of(pred_path);
        let target_path = targets
            .iter()
            .find(|t| t.file_name() == pred_path.file_name())
            .ok_or_else(|| AppError::Pairing(name.clone()))?;
        let pred = io::load_image(pred_path)?;
        let target = io::load_image(target_path)?;
        rows.push(EvalRow { name, psnr: psnr(&pred, &target)?, ssim: ssim(&pred, &target)? });
    }

    let n = rows.len();
    let (mean_psnr, std_psnr) = mean_std(rows.iter().map(|r| r.psnr), n);
    let (mean_ssim, std_ssim) = mean_std(rows.iter().map(|r| r.ssim), n);
    Ok(EvalReport { rows, mean_psnr, mean_ssim, std_psnr, std_ssim })
}

/// Writes `report.csv` (one row per image) and `report.txt` (the summary)
/// under `out_dir`; returns both paths.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    io::ensure_dir(out_dir)?;

    let mut csv = String::from("name,psnr,ssim\n");
    for row in &report.rows {
        writeln!(csv, "{},{:.6e},{:.6e}", row.name, row.psnr, row.ssim).expect("string write");
    }
    let csv_path = out_dir.join("report.csv");
    io::write_atomic(&csv_path, csv.as_bytes())?;

    let txt = format!(
        "images: {}\npsnr_mean_db: {:.6}\npsnr_std_db: {:.6}\nssim_mean: {:.6}\nssim_std: {:.6}\n",
        report.rows.len(),
        report.mean_psnr,
        report.std_psnr,
        report.mean_ssim,
        report.std_ssim
    );
    let txt_path = out_dir.join("report.txt");
    io::write_atomic(&txt_path, txt.as_bytes())?;
    Ok((csv_path, txt_path))
}
