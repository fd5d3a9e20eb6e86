//! Command-line surface.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, unknown
//! subcommands), 1 when a subcommand starts but fails.

use crate::config::{Profile, RunConfig};
use crate::error::{AppError, Result};
use crate::{backbone, dataset, evaluate, io, toy, trainer};
use catintell_core::baseline::Severity;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "catintell",
    version,
    about = "Two-stage GAN pipeline: synthesize cataract-like fundus degradations, then restore them"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config-related flags shared by the training subcommands. Precedence:
/// explicit flag > config file > built-in profile default.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in hyper-parameter profile.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Master seed for weights, sampling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the phase's iteration count.
    #[arg(long)]
    iters: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), self.profile, self.seed)
    }

    /// Resolves the config with `--iters` applied to the main schedule.
    fn resolve_main(&self) -> Result<RunConfig> {
        let mut rc = self.resolve()?;
        if let Some(n) = self.iters {
            rc.train.iterations = n;
            if rc.train.warmup_iters >= n {
                rc.train.warmup_iters = n / 10;
            }
            rc.validate()?;
        }
        Ok(rc)
    }

    /// Resolves the config with `--iters` applied to the fine-tune schedule.
    fn resolve_finetune(&self) -> Result<RunConfig> {
        let mut rc = self.resolve()?;
        if let Some(n) = self.iters {
            rc.train.finetune_iterations = n;
            rc.validate()?;
        }
        Ok(rc)
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SeverityArg {
    Mild,
    Medium,
    Severe,
}

impl From<SeverityArg> for Severity {
    fn from(s: SeverityArg) -> Severity {
        match s {
            SeverityArg::Mild => Severity::Mild,
            SeverityArg::Medium => Severity::Medium,
            SeverityArg::Severe => Severity::Severe,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a procedural toy corpus: clear images, three haze tiers and a
    /// quality manifest.
    MakeToy {
        /// Corpus root to create.
        #[arg(long)]
        out: PathBuf,
        /// Number of clear images (each gets three degraded variants).
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Train the degradation-synthesis stage on an unpaired corpus
    /// (`<data>/hq` and `<data>/cataract`).
    TrainSyn {
        /// Corpus root containing `hq/` and `cataract/`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, logs, previews and the config snapshot.
        #[arg(long)]
        run_dir: PathBuf,
        /// Cross-validation fold held out for validation.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Materialize synthetic degraded twins for a directory of clear images
    /// using a trained synthesis checkpoint.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of clear images.
        #[arg(long)]
        hq: PathBuf,
        /// Output directory for the pairs and their manifest.
        #[arg(long)]
        out: PathBuf,
        /// Accepted for interface uniformity; synthesis is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the restoration stage on a synthetic-pair manifest.
    TrainRes {
        /// `pairs.tsv` manifest (as written by `synthesize`).
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a trained restoration checkpoint at a reduced rate.
    FinetuneRes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore every image in a directory with a restoration checkpoint.
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Accepted for interface uniformity; restoration is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against same-named targets (PSNR and SSIM).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for interface uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply the parametric haze degradation to a directory of images.
    DegradeBaseline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = SeverityArg::Medium)]
        severity: SeverityArg,
        /// Accepted for interface uniformity; the degradation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `argv` and runs the requested subcommand, mapping every outcome to
/// a process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::MakeToy { out, count, seed, size } => {
            let corpus = toy::make_toy_corpus(count, seed, size, &out)?;
            println!(
                "wrote {} clear and {} degraded images under {}",
                corpus.hq_count,
                corpus.degraded_count,
                corpus.root.display()
            );
            Ok(())
        }
        Cmd::TrainSyn { data, run_dir, fold, resume, cfg } => {
            let rc = cfg.resolve_main()?;
            io::ensure_dir(&run_dir)?;
            rc.snapshot(&run_dir)?;
            let corpus = dataset::scan_corpus(&data, "hq", "cataract")?;
            let folds = dataset::make_folds(&corpus, rc.seed)?;
            let split = folds.get(fold).ok_or_else(|| {
                AppError::Config(format!("fold {fold} out of range (0..{})", folds.len()))
            })?;
            let quality = data.join("quality.tsv");
            let quality = quality.is_file().then_some(quality);
            let bb = backbone::ensure_backbone(&rc, quality.as_deref(), &split.train_hq, &run_dir)?;
            let ckpt = trainer::train_syn(split, &bb, &rc, &run_dir, resume.as_deref())?;
            println!("synthesis checkpoint: {}", ckpt.display());
            Ok(())
        }
        Cmd::Synthesize { ckpt, hq, out, seed: _ } => {
            let hq_paths = io::list_images(&hq)?;
            if hq_paths.is_empty() {
                return Err(AppError::EmptyCorpus(hq));
            }
            let manifest = trainer::generate_pairs(&ckpt, &hq_paths, &out)?;
            println!("pair manifest: {}", manifest.display());
            Ok(())
        }
        Cmd::TrainRes { pairs, run_dir, resume, cfg } => {
            let rc = cfg.resolve_main()?;
            io::ensure_dir(&run_dir)?;
            rc.snapshot(&run_dir)?;
            let records = dataset::read_pairs(&pairs)?;
            let hq_paths: Vec<PathBuf> = records.iter().map(|r| r.hq_path.clone()).collect();
            let bb = backbone::ensure_backbone(&rc, None, &hq_paths, &run_dir)?;
            let ckpt = trainer::train_res(&records, &bb, &rc, &run_dir, resume.as_deref())?;
            println!("restoration checkpoint: {}", ckpt.display());
            Ok(())
        }
        Cmd::FinetuneRes { ckpt, pairs, run_dir, cfg } => {
            let rc = cfg.resolve_finetune()?;
            io::ensure_dir(&run_dir)?;
            rc.snapshot(&run_dir)?;
            let records = dataset::read_pairs(&pairs)?;
            let hq_paths: Vec<PathBuf> = records.iter().map(|r| r.hq_path.clone()).collect();
            let bb = backbone::ensure_backbone(&rc, None, &hq_paths, &run_dir)?;
            let out = trainer::finetune_res(&ckpt, &records, &bb, &rc, &run_dir)?;
            println!("fine-tuned checkpoint: {}", out.display());
            Ok(())
        }
        Cmd::Restore { input, ckpt, output, seed: _ } => {
            let n = trainer::restore_dir(&ckpt, &input, &output)?;
            println!("restored {n} images into {}", output.display());
            Ok(())
        }
        Cmd::Evaluate { pred, target, out, seed: _ } => {
            let report = evaluate::evaluate(&pred, &target)?;
            let out_dir = out.unwrap_or_else(|| pred.clone());
            let (csv, _) = evaluate::write_report(&report, &out_dir)?;
            println!(
                "{} images: psnr {:.4} dB, ssim {:.6} ({})",
                report.rows.len(),
                report.mean_psnr,
                report.mean_ssim,
                csv.display()
            );
            Ok(())
        }
        Cmd::DegradeBaseline { input, output, severity, seed: _ } => {
            let n = toy::degrade_dir(&input, &output, severity.into())?;
            println!("degraded {n} images into {}", output.display());
            Ok(())
        }
    }
}
