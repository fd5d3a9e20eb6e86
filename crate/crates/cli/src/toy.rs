//! Self-contained toy data: procedurally rendered fundus-like images, their
//! parametric haze degradations, and the quality-label manifest that trains
//! the perceptual backbone.

use crate::error::{AppError, Result};
use crate::io::{self, save_image};
use catintell_core::baseline::{degrade, render_toy_fundus, Severity};
use catintell_core::rng;
use std::path::{Path, PathBuf};

/// Quality classes, in label-index order: clear, mildly/moderately clouded,
/// and heavily clouded.
pub const QUALITY_LABELS: [&str; 3] = ["good", "usable", "reject"];

/// Index of a quality label in [`QUALITY_LABELS`], if it is one.
pub fn label_index(label: &str) -> Option<usize> {
    QUALITY_LABELS.iter().position(|l| *l == label)
}

fn quality_label(severity: Severity) -> &'static str {
    match severity {
        Severity::Mild | Severity::Medium => "usable",
        Severity::Severe => "reject",
    }
}

/// What [`make_toy_corpus`] wrote.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub quality_manifest: PathBuf,
    pub hq_count: usize,
    pub degraded_count: usize,
}

/// Renders `n` clear images under `out_dir/hq`, three degraded tiers per
/// image under `out_dir/cataract`, and `quality.tsv` with one
/// `path<TAB>label` row per written image (no header).
pub fn make_toy_corpus(n: usize, seed: u64, size: usize, out_dir: &Path) -> Result<ToyCorpus> {
    if n == 0 {
        return Err(AppError::Config("toy corpus needs at least one image".into()));
    }
    let hq_dir = out_dir.join("hq");
    let cat_dir = out_dir.join("cataract");
    io::ensure_dir(&hq_dir)?;
    io::ensure_dir(&cat_dir)?;

    let mut rows = String::new();
    for i in 0..n {
        let mut r = rng::derive(seed, &format!("toy.{i}"));
        let img = render_toy_fundus(size, &mut r)?;
        let name = format!("toy_{i:03}.png");
        save_image(&img, &hq_dir.join(&name))?;
        rows.push_str(&format!("hq/{name}\tgood\n"));
        for severity in Severity::ALL {
            let deg = degrade(&img, &severity.params())?;
            let dname = format!("toy_{i:03}_{}.png", severity.name());
            save_image(&deg, &cat_dir.join(&dname))?;
            rows.push_str(&format!("cataract/{dname}\t{}\n", quality_label(severity)));
        }
    }
    let quality_manifest = out_dir.join("quality.tsv");
    io::write_atomic(&quality_manifest, rows.as_bytes())?;
    Ok(ToyCorpus {
        root: out_dir.to_path_buf(),
        quality_manifest,
        hq_count: n,
        degraded_count: 3 * n,
    })
}

/// Parses a quality manifest into (image path, label index) rows. Relative
/// paths resolve against the manifest's directory.
pub fn read_quality_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = io::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (raw, label) = line.split_once('\t').ok_or_else(|| {
            AppError::Config(format!(
                "{}:{}: expected path<TAB>label",
                path.display(),
                idx + 1
            ))
        })?;
        let class = label_index(label).ok_or_else(|| {
            AppError::Config(format!(
                "{}:{}: unknown quality label {label:?} (expected one of {QUALITY_LABELS:?})",
                path.display(),
                idx + 1
            ))
        })?;
        let p = PathBuf::from(raw);
        let p = if p.is_absolute() { p } else { base.join(p) };
        if !p.is_file() {
            return Err(AppError::NotFound(p));
        }
        out.push((p, class));
    }
    Ok(out)
}

/// Applies the parametric haze degradation to every image in `input_dir`,
/// writing same-named files into `output_dir`. Returns how many were
/// processed.
pub fn degrade_dir(input_dir: &Path, output_dir: &Path, severity: Severity) -> Result<usize> {
    let inputs = io::list_images(input_dir)?;
    if inputs.is_empty() {
        return Err(AppError::EmptyCorpus(input_dir.to_path_buf()));
    }
    io::ensure_dir(output_dir)?;
    let params = severity.params();
    for path in &inputs {
        let img = io::load_image(path)?;
        let deg = degrade(&img, &params)?;
        let name = path.file_name().expect("listed files have names");
        save_image(&deg, &output_dir.join(name))?;
    }
    Ok(inputs.len())
}
