//! Corpus ingestion, deterministic 10-fold splits, unpaired/paired batch
//! sampling, and the tab-separated pair manifest.

use crate::error::{AppError, Result};
use crate::io::{self, load_image};
use catintell_core::image::{batch_from_images, paired_random_crop, CropSpec, Image};
use catintell_core::{rng, Arr};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

/// Unpaired lists of clear and degraded images under one root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub root: PathBuf,
    pub hq: Vec<PathBuf>,
    pub cataract: Vec<PathBuf>,
}

/// One of the ten train/validation partitions of a [`Corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_hq: Vec<PathBuf>,
    pub val_hq: Vec<PathBuf>,
    pub train_cat: Vec<PathBuf>,
    pub val_cat: Vec<PathBuf>,
}

/// A clear image and its degraded twin on disk, equal in size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub hq_path: PathBuf,
    pub syn_path: PathBuf,
}

/// Scans `root/<hq_subdir>` and `root/<cataract_subdir>` for supported
/// images, each list lexicographically sorted.
pub fn scan_corpus(root: &Path, hq_subdir: &str, cataract_subdir: &str) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(AppError::NotFound(root.to_path_buf()));
    }
    let hq_dir = root.join(hq_subdir);
    let cat_dir = root.join(cataract_subdir);
    let hq = io::list_images(&hq_dir)?;
    if hq.is_empty() {
        return Err(AppError::EmptyCorpus(hq_dir));
    }
    let cataract = io::list_images(&cat_dir)?;
    if cataract.is_empty() {
        return Err(AppError::EmptyCorpus(cat_dir));
    }
    Ok(Corpus { root: root.to_path_buf(), hq, cataract })
}

/// Validation-block size for a class of `n` images: the nearest tenth,
/// capped so the tenth fold (which absorbs the remainder) keeps at least one
/// image. 2436 gives 244 and 1144 gives 114, leaving last folds of 240 and
/// 118 respectively.
fn fold_block(n: usize) -> usize {
    ((n + 5) / 10).min((n - 1) / 9)
}

fn split_class(
    paths: &[PathBuf],
    seed: u64,
    tag: &str,
) -> Result<Vec<(Vec<PathBuf>, Vec<PathBuf>)>> {
    let n = paths.len();
    if n < 10 {
        return Err(AppError::TooFewImages { class: tag.to_string(), n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, &format!("folds.{tag}")));
    let s = fold_block(n);
    let mut folds = Vec::with_capacity(10);
    for f in 0..10 {
        let (start, end) = if f < 9 { (f * s, (f + 1) * s) } else { (9 * s, n) };
        let val: Vec<PathBuf> = order[start..end].iter().map(|&i| paths[i].clone()).collect();
        let train: Vec<PathBuf> = order[..start]
            .iter()
            .chain(&order[end..])
            .map(|&i| paths[i].clone())
            .collect();
        folds.push((train, val));
    }
    Ok(folds)
}

/// Ten disjoint validation splits per class from a seeded permutation; the
/// union of the validation sets is the corpus.
pub fn make_folds(corpus: &Corpus, seed: u64) -> Result<Vec<FoldSplit>> {
    let hq = split_class(&corpus.hq, seed, "hq")?;
    let cat = split_class(&corpus.cataract, seed, "cataract")?;
    Ok(hq
        .into_iter()
        .zip(cat)
        .enumerate()
        .map(|(fold_index, ((train_hq, val_hq), (train_cat, val_cat)))| FoldSplit {
            fold_index,
            train_hq,
            val_hq,
            train_cat,
            val_cat,
        })
        .collect())
}

/// Draws one training patch: uniform image choice, bilinear resize to
/// `resize_to`, uniform crop, then independent horizontal/vertical flips.
fn sample_patch<R: Rng>(
    paths: &[PathBuf],
    patch: usize,
    resize_to: usize,
    rng: &mut R,
) -> Result<Image> {
    let img = load_image(&paths[rng.gen_range(0..paths.len())])?;
    let img = img.resize(resize_to, resize_to)?;
    let top = rng.gen_range(0..=resize_to - patch);
    let left = rng.gen_range(0..=resize_to - patch);
    let cropped = img.crop(CropSpec { top, left, height: patch, width: patch })?;
    let horizontal = rng.gen_bool(0.5);
    let vertical = rng.gen_bool(0.5);
    Ok(cropped.flip(horizontal, vertical))
}

/// Independent clear and degraded patch stacks (no pairing), each
/// `(batch, 3, patch, patch)`.
pub fn sample_unpaired_batch<R: Rng>(
    split: &FoldSplit,
    batch: usize,
    patch: usize,
    resize_to: usize,
    rng: &mut R,
) -> Result<(Arr, Arr)> {
    let mut hq = Vec::with_capacity(batch);
    for _ in 0..batch {
        hq.push(sample_patch(&split.train_hq, patch, resize_to, rng)?);
    }
    let mut cat = Vec::with_capacity(batch);
    for _ in 0..batch {
        cat.push(sample_patch(&split.train_cat, patch, resize_to, rng)?);
    }
    Ok((batch_from_images(&hq)?, batch_from_images(&cat)?))
}

/// Aligned (degraded, clear) patch stacks from stored pairs: the same crop
/// window and the same flips are applied to both sides of each pair.
pub fn sample_paired_batch<R: Rng>(
    pairs: &[PairRecord],
    batch: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(Arr, Arr)> {
    let mut degraded = Vec::with_capacity(batch);
    let mut clear = Vec::with_capacity(batch);
    for _ in 0..batch {
        let rec = &pairs[rng.gen_range(0..pairs.len())];
        let hq = load_image(&rec.hq_path)?;
        let syn = load_image(&rec.syn_path)?;
        let (hq_patch, syn_patch, _) = paired_random_crop(&hq, &syn, patch, rng)?;
        let horizontal = rng.gen_bool(0.5);
        let vertical = rng.gen_bool(0.5);
        degraded.push(syn_patch.flip(horizontal, vertical));
        clear.push(hq_patch.flip(horizontal, vertical));
    }
    Ok((batch_from_images(&degraded)?, batch_from_images(&clear)?))
}

/// Writes `pairs.tsv` under `store`: one `hq<TAB>syn` line per record, in
/// order. Returns the manifest path.
pub fn write_pairs(store: &Path, records: &[PairRecord]) -> Result<PathBuf> {
    io::ensure_dir(store)?;
    let mut body = String::new();
    for r in records {
        body.push_str(&format!("{}\t{}\n", r.hq_path.display(), r.syn_path.display()));
    }
    let path = store.join("pairs.tsv");
    io::write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Reads a pair manifest; relative paths resolve against the manifest's
/// directory, and every referenced file must exist.
pub fn read_pairs(manifest: &Path) -> Result<Vec<PairRecord>> {
    let text = io::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let resolve = |raw: &str| -> PathBuf {
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (hq, syn) = line.split_once('\t').ok_or_else(|| {
            AppError::Config(format!(
                "{}:{}: expected two tab-separated paths",
                manifest.display(),
                idx + 1
            ))
        })?;
        let rec = PairRecord { hq_path: resolve(hq), syn_path: resolve(syn) };
        for p in [&rec.hq_path, &rec.syn_path] {
            if !p.is_file() {
                return Err(AppError::NotFound(p.clone()));
            }
        }
        out.push(rec);
    }
    Ok(out)
}
