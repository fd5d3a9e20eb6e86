//! The adversarial training loop shared by both pipeline stages, plus the
//! phase drivers: unpaired degradation-synthesis training, paired
//! restoration training, restoration fine-tuning, synthetic-pair generation
//! and batch restoration.
//!
//! Every step consumes randomness only from the state's own generator and
//! in a fixed order, so a checkpoint resumes onto the exact trajectory a
//! straight run would have taken.

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::dataset::{self, FoldSplit, PairRecord};
use crate::error::{AppError, Result};
use crate::io;
use catintell_core::discriminator::DiscriminatorModel;
use catintell_core::generator::GeneratorModel;
use catintell_core::image::{batch_from_images, images_from_batch};
use catintell_core::losses::{self, LossReport, LossWeights};
use catintell_core::optim::{clip_global_norm, Adam};
use catintell_core::perceptual::FeatureExtractor;
use catintell_core::rng;
use catintell_core::schedule::{lr_at, TrainConfig};
use catintell_core::tape::Tape;
use catintell_core::{Arr, CoreError};
use ndarray::{Axis, Slice};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Which leg of the pipeline a state belongs to. The tag is stored in every
/// checkpoint and enforced on load, so a restoration fine-tune cannot
/// silently start from a synthesis checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Unpaired clear-to-degraded synthesis training.
    Syn,
    /// Paired restoration training.
    Res,
    /// Restoration fine-tuning at a reduced, linearly decaying rate.
    ResFinetune,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Syn => "syn",
            Phase::Res => "res",
            Phase::ResFinetune => "res-finetune",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Phase> {
        match tag {
            "syn" => Some(Phase::Syn),
            "res" => Some(Phase::Res),
            "res-finetune" => Some(Phase::ResFinetune),
            _ => None,
        }
    }

    fn weights(self) -> LossWeights {
        match self {
            Phase::Syn => LossWeights::syn(),
            Phase::Res | Phase::ResFinetune => LossWeights::res(),
        }
    }
}

/// Everything the loop mutates: models, optimizers, the sampling RNG and
/// the step counter. Serializes into a checkpoint and back without loss.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub phase: Phase,
    pub step: u64,
    pub gen: GeneratorModel,
    pub disc: DiscriminatorModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
}

/// Scalars produced by one alternation.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub lr: f64,
    pub report: LossReport,
    pub d_loss: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

impl TrainState {
    /// Freshly initialized state for a phase; all randomness derives from
    /// the run seed and the phase tag.
    pub fn new(phase: Phase, rc: &RunConfig) -> Result<TrainState> {
        let (gen_cfg, disc_cfg) = match phase {
            Phase::Syn => (&rc.syn_generator, &rc.syn_discriminator),
            Phase::Res | Phase::ResFinetune => (&rc.res_generator, &rc.res_discriminator),
        };
        let tag = phase.tag();
        let gen = GeneratorModel::build(
            gen_cfg.clone(),
            &mut rng::derive(rc.seed, &format!("init.gen.{tag}")),
        )?;
        let disc = DiscriminatorModel::build(
            disc_cfg.clone(),
            &mut rng::derive(rc.seed, &format!("init.disc.{tag}")),
        )?;
        let opt_g = Adam::new(gen.params(), rc.train.beta1, rc.train.beta2);
        let opt_d = Adam::new(disc.params(), rc.train.beta1, rc.train.beta2);
        Ok(TrainState {
            phase,
            step: 0,
            gen,
            disc,
            opt_g,
            opt_d,
            rng: rng::derive(rc.seed, &format!("train.{tag}")),
        })
    }
}

fn ensure_finite(what: &str, batch: &Arr) -> Result<()> {
    if batch.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numerical(format!("non-finite values in the {what} batch")).into())
    }
}

/// One adversarial alternation: a discriminator update on (real, generated)
/// with hard labels, then a generator update on the composite objective.
///
/// `input` feeds the generator, `reference` anchors the pixel and perceptual
/// terms, `real` feeds the discriminator's positive side, and `identity_src`
/// probes that the generator leaves already-converted images alone. Inputs
/// are validated before anything mutates, so a poisoned batch cannot corrupt
/// the state.
pub fn gan_step(
    state: &mut TrainState,
    backbone: &FeatureExtractor,
    input: &Arr,
    reference: &Arr,
    real: &Arr,
    identity_src: &Arr,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    ensure_finite("generator input", input)?;
    ensure_finite("reference", reference)?;
    ensure_finite("real", real)?;
    ensure_finite("identity", identity_src)?;
    if !backbone.is_frozen() {
        return Err(AppError::Config("the perceptual backbone must be frozen".into()));
    }

    // Generator forward first; its output batch feeds the discriminator
    // update as a constant (no generator gradients flow through it).
    let mut tape_g = Tape::new();
    let bind_g = state.gen.bind(&mut tape_g);
    let input_n = tape_g.constant(input.clone());
    let fake_n = state.gen.forward_t(&mut tape_g, &bind_g, input_n);
    let fake_value = tape_g.value(fake_n).clone();
    ensure_finite("generated", &fake_value)?;

    let batch = input.shape()[0];
    let ones = Arr::from_elem(ndarray::IxDyn(&[batch]), 1.0);
    let zeros = Arr::zeros(ndarray::IxDyn(&[batch]));

    // Discriminator update: real images toward 1, generated toward 0.
    let (d_loss, grad_norm_d) = {
        let mut tape_d = Tape::new();
        let bind_d = state.disc.bind(&mut tape_d);
        let real_n = tape_d.constant(real.clone());
        let fake_c = tape_d.constant(fake_value.clone());
        let logits_real = state.disc.forward_t(&mut tape_d, &bind_d, real_n);
        let logits_fake = state.disc.forward_t(&mut tape_d, &bind_d, fake_c);
        let bce_real = tape_d.bce_logits_mean(logits_real, &ones);
        let bce_fake = tape_d.bce_logits_mean(logits_fake, &zeros);
        let loss_n = tape_d.weighted_sum(&[(bce_real, 0.5), (bce_fake, 0.5)]);
        let d_loss = tape_d.scalar(loss_n);
        if !d_loss.is_finite() {
            return Err(CoreError::Numerical(format!(
                "discriminator loss is non-finite at step {}",
                state.step
            ))
            .into());
        }
        let mut grads = tape_d.backward(loss_n);
        let mut per: Vec<Option<Arr>> =
            bind_d.nodes().iter().map(|&n| grads.take(n)).collect();
        let norm = clip_global_norm(&mut per, cfg.grad_clip);
        state.opt_d.step(state.disc.params_mut(), &per, lr)?;
        (d_loss, norm)
    };

    // Generator's adversarial target: hard ones, or the (just updated)
    // discriminator's live opinion of the real batch.
    let gan_targets = if cfg.soft_target {
        Arr::from_shape_vec(ndarray::IxDyn(&[batch]), state.disc.predict(real)?)
            .expect("prediction count matches batch")
    } else {
        ones
    };

    // Generator update against the post-update discriminator.
    let bind_d_for_g = state.disc.bind(&mut tape_g);
    let fake_logits = state.disc.forward_t(&mut tape_g, &bind_d_for_g, fake_n);
    let gan_n = tape_g.bce_logits_mean(fake_logits, &gan_targets);

    let reference_n = tape_g.constant(reference.clone());
    let pixel_n = tape_g.smooth_l1_mean(fake_n, reference_n);

    let ref_taps = backbone.features_eval(reference)?;
    let bind_bb = backbone.bind(&mut tape_g);
    let (fp_n, style_n) = backbone.fp_terms_t(&mut tape_g, &bind_bb, fake_n, &ref_taps);

    let id_count = if cfg.identity_batch == 0 {
        batch
    } else {
        cfg.identity_batch.min(identity_src.shape()[0])
    };
    let id_src = identity_src
        .slice_axis(Axis(0), Slice::from(..id_count))
        .to_owned();
    let id_in = tape_g.constant(id_src);
    let id_out = state.gen.forward_t(&mut tape_g, &bind_g, id_in);
    let identity_n = tape_g.smooth_l1_mean(id_out, id_in);

    let weights = state.phase.weights();
    let total_n = tape_g.weighted_sum(&[
        (pixel_n, weights.pixel),
        (fp_n, weights.fp),
        (style_n, weights.fp * cfg.fp_style_weight),
        (identity_n, weights.identity),
        (gan_n, weights.gan),
    ]);

    // `composite` re-derives the total from the pieces and rejects any
    // non-finite component before the generator is touched.
    let report = losses::composite(
        tape_g.scalar(pixel_n),
        tape_g.scalar(fp_n),
        tape_g.scalar(style_n),
        tape_g.scalar(identity_n),
        tape_g.scalar(gan_n),
        cfg.fp_style_weight,
        &weights,
    )?;

    let mut grads = tape_g.backward(total_n);
    let mut per: Vec<Option<Arr>> = bind_g.nodes().iter().map(|&n| grads.take(n)).collect();
    let grad_norm_g = clip_global_norm(&mut per, cfg.grad_clip);
    state.opt_g.step(state.gen.params_mut(), &per, lr)?;

    state.step += 1;
    Ok(StepReport { lr, report, d_loss, grad_norm_g, grad_norm_d })
}

/// Where a phase's batches come from.
pub enum DataSource<'a> {
    /// Independent clear/degraded pools (synthesis training).
    Unpaired(&'a FoldSplit),
    /// Stored (clear, degraded) pairs (restoration training).
    Paired(&'a [PairRecord]),
}

impl DataSource<'_> {
    /// `(input, reference, real, identity_src)` for one step, in the
    /// convention [`gan_step`] expects.
    fn sample(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Arr, Arr, Arr, Arr)> {
        match self {
            // The synthesis generator degrades clear images; the pixel and
            // perceptual anchors keep the content of the clear input, the
            // discriminator compares against genuine degraded images, and
            // the identity probe feeds degraded images back through.
            DataSource::Unpaired(split) => {
                let (hq, cat) =
                    dataset::sample_unpaired_batch(split, cfg.batch, cfg.patch, cfg.resize_to, rng)?;
                Ok((hq.clone(), hq, cat.clone(), cat))
            }
            // The restoration generator maps degraded to clear; everything
            // anchors on the clear side, and the identity probe feeds clear
            // images through.
            DataSource::Paired(pairs) => {
                let (degraded, clear) =
                    dataset::sample_paired_batch(pairs, cfg.batch, cfg.patch, rng)?;
                Ok((degraded, clear.clone(), clear.clone(), clear))
            }
        }
    }

    fn preview_source(&self) -> Option<&Path> {
        match self {
            DataSource::Unpaired(split) => split
                .val_hq
                .first()
                .or_else(|| split.train_hq.first())
                .map(PathBuf::as_path),
            DataSource::Paired(pairs) => pairs.first().map(|p| p.syn_path.as_path()),
        }
    }
}

const LOG_COLUMNS: &str = "step,lr,pixel,fp,fp_style,identity,gan,total,d_loss";

fn log_row(step: u64, r: &StepReport) -> String {
    let mut s = String::new();
    write!(
        s,
        "{step},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
        r.lr,
        r.report.pixel,
        r.report.fp,
        r.report.fp_style,
        r.report.identity,
        r.report.gan,
        r.report.total,
        r.d_loss
    )
    .expect("string write");
    s
}

/// Runs `state` to the end of its schedule, logging one CSV row per step,
/// checkpointing periodically and writing a validation preview image.
fn run_phase(
    mut state: TrainState,
    rc: &RunConfig,
    cfg: &TrainConfig,
    source: &DataSource,
    backbone: &FeatureExtractor,
    run_dir: &Path,
) -> Result<TrainState> {
    io::ensure_dir(run_dir)?;
    let tag = state.phase.tag();
    let log_path = run_dir.join(format!("train_log_{tag}.csv"));
    let mut log = if state.step > 0 && log_path.is_file() {
        std::fs::read_to_string(&log_path).map_err(|e| AppError::io(&log_path, e))?
    } else {
        format!("{LOG_COLUMNS}\n")
    };

    while state.step < cfg.iterations {
        let step = state.step;
        let lr = lr_at(cfg, step)?;
        let (input, reference, real, identity_src) = source.sample(cfg, &mut state.rng)?;
        let report =
            gan_step(&mut state, backbone, &input, &reference, &real, &identity_src, cfg, lr)?;
        log.push_str(&log_row(step, &report));
        log.push('\n');

        if state.step % cfg.checkpoint_every == 0 && state.step < cfg.iterations {
            let dir = run_dir.join("checkpoints");
            io::ensure_dir(&dir)?;
            save_state(&state, rc, &dir.join(format!("{tag}_{:06}.ckpt", state.step)))?;
            io::write_atomic(&log_path, log.as_bytes())?;
        }
        if state.step % cfg.validate_every == 0 {
            if let Some(src) = source.preview_source() {
                write_preview(&state, cfg, src, run_dir)?;
            }
        }
    }

    io::write_atomic(&log_path, log.as_bytes())?;
    Ok(state)
}

/// Runs the current generator over one image (resized to the training
/// resolution) and drops the result into `run_dir/previews/`.
fn write_preview(state: &TrainState, cfg: &TrainConfig, src: &Path, run_dir: &Path) -> Result<()> {
    let dir = run_dir.join("previews");
    io::ensure_dir(&dir)?;
    let img = io::load_image(src)?.resize(cfg.resize_to, cfg.resize_to)?;
    let out = state.gen.forward(&batch_from_images(&[img])?)?;
    let preview = images_from_batch(&out)?.remove(0);
    io::save_image(
        &preview,
        &dir.join(format!("{}_{:06}.png", state.phase.tag(), state.step)),
    )
}

/// Serializes the full state (models, optimizer moments, RNG, step) plus the
/// run config into a single-file checkpoint.
pub fn save_state(state: &TrainState, rc: &RunConfig, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    for (name, value) in state.gen.params().iter() {
        arrays.push((format!("gen.{name}"), value.clone()));
    }
    for (name, value) in state.disc.params().iter() {
        arrays.push((format!("disc.{name}"), value.clone()));
    }
    for (which, model_params, opt) in [
        ("opt_g", state.gen.params(), &state.opt_g),
        ("opt_d", state.disc.params(), &state.opt_d),
    ] {
        for (i, (m, v)) in opt.moments().iter().enumerate() {
            let name = model_params.name(i);
            arrays.push((format!("{which}.m.{name}"), m.clone()));
            arrays.push((format!("{which}.v.{name}"), v.clone()));
        }
    }
    Container {
        phase: state.phase.tag().into(),
        step: state.step,
        opt_g_steps: state.opt_g.t,
        opt_d_steps: state.opt_d.t,
        config: rc.clone(),
        rng: state.rng.clone(),
        arrays,
    }
    .save(path)
}

/// Rebuilds a [`TrainState`] from a checkpoint, returning it together with
/// the run config the checkpoint was trained under.
pub fn load_state(path: &Path) -> Result<(TrainState, RunConfig)> {
    let container = Container::load(path)?;
    let phase = Phase::from_tag(&container.phase).ok_or_else(|| {
        AppError::Phase { expected: "syn, res or res-finetune".into(), found: container.phase.clone() }
    })?;
    let rc = container.config.clone();
    let mut state = TrainState::new(phase, &rc)?;

    for (prefix, params) in [
        ("gen", state.gen.params_mut()),
        ("disc", state.disc.params_mut()),
    ] {
        for i in 0..params.len() {
            let name = format!("{prefix}.{}", params.name(i));
            let value = container
                .array(&name)
                .ok_or_else(|| AppError::Checkpoint(format!("missing array {name}")))?;
            params.set_value(i, value.clone())?;
        }
    }
    for (which, params, opt, steps) in [
        ("opt_g", state.gen.params(), &mut state.opt_g, container.opt_g_steps),
        ("opt_d", state.disc.params(), &mut state.opt_d, container.opt_d_steps),
    ] {
        let mut moments = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let name = params.name(i);
            let m = container
                .array(&format!("{which}.m.{name}"))
                .ok_or_else(|| AppError::Checkpoint(format!("missing array {which}.m.{name}")))?;
            let v = container
                .array(&format!("{which}.v.{name}"))
                .ok_or_else(|| AppError::Checkpoint(format!("missing array {which}.v.{name}")))?;
            moments.push((m.clone(), v.clone()));
        }
        opt.restore(steps, moments)?;
    }

    state.step = container.step;
    state.rng = container.rng;
    Ok((state, rc))
}

/// Trains the degradation-synthesis stage on unpaired clear/degraded pools.
/// Returns the final checkpoint path (`run_dir/syn.ckpt`).
pub fn train_syn(
    split: &FoldSplit,
    backbone: &FeatureExtractor,
    rc: &RunConfig,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let (state, rc_eff) = match resume {
        Some(path) => {
            let (state, ckpt_rc) = load_state(path)?;
            if state.phase != Phase::Syn {
                return Err(AppError::Phase {
                    expected: "syn".into(),
                    found: state.phase.tag().into(),
                });
            }
            (state, ckpt_rc)
        }
        None => (TrainState::new(Phase::Syn, rc)?, rc.clone()),
    };
    let state = run_phase(
        state,
        &rc_eff,
        &rc_eff.train,
        &DataSource::Unpaired(split),
        backbone,
        run_dir,
    )?;
    let out = run_dir.join("syn.ckpt");
    save_state(&state, &rc_eff, &out)?;
    Ok(out)
}

/// Trains the restoration stage on stored pairs. Returns the final
/// checkpoint path (`run_dir/res.ckpt`).
pub fn train_res(
    pairs: &[PairRecord],
    backbone: &FeatureExtractor,
    rc: &RunConfig,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    if pairs.is_empty() {
        return Err(AppError::Config("the pair manifest is empty".into()));
    }
    let (state, rc_eff) = match resume {
        Some(path) => {
            let (state, ckpt_rc) = load_state(path)?;
            if state.phase != Phase::Res {
                return Err(AppError::Phase {
                    expected: "res".into(),
                    found: state.phase.tag().into(),
                });
            }
            (state, ckpt_rc)
        }
        None => (TrainState::new(Phase::Res, rc)?, rc.clone()),
    };
    let state = run_phase(
        state,
        &rc_eff,
        &rc_eff.train,
        &DataSource::Paired(pairs),
        backbone,
        run_dir,
    )?;
    let out = run_dir.join("res.ckpt");
    save_state(&state, &rc_eff, &out)?;
    Ok(out)
}

/// Continues a finished restoration checkpoint under the fine-tune schedule
/// (reduced rate, linear decay, no warmup). Returns the final checkpoint
/// path (`run_dir/res_finetuned.ckpt`).
pub fn finetune_res(
    ckpt: &Path,
    pairs: &[PairRecord],
    backbone: &FeatureExtractor,
    rc: &RunConfig,
    run_dir: &Path,
) -> Result<PathBuf> {
    if pairs.is_empty() {
        return Err(AppError::Config("the pair manifest is empty".into()));
    }
    let (mut state, _) = load_state(ckpt)?;
    if state.phase != Phase::Res {
        return Err(AppError::Phase { expected: "res".into(), found: state.phase.tag().into() });
    }
    state.phase = Phase::ResFinetune;
    state.step = 0;
    state.rng = rng::derive(rc.seed, "train.res-finetune");

    let cfg = rc.train.finetune_schedule()?;
    let state = run_phase(state, rc, &cfg, &DataSource::Paired(pairs), backbone, run_dir)?;
    let out = run_dir.join("res_finetuned.ckpt");
    save_state(&state, rc, &out)?;
    Ok(out)
}

/// Materializes one synthetic degraded twin per clear image using a trained
/// synthesis checkpoint, at the training resolution. Clear copies land in
/// `out_dir/clear/`, degraded twins under the same name in
/// `out_dir/degraded/`, and the pair manifest ties them together. Reruns are
/// byte-identical: no randomness is consumed.
pub fn generate_pairs(ckpt: &Path, hq_paths: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    let (state, rc) = load_state(ckpt)?;
    if state.phase != Phase::Syn {
        return Err(AppError::Phase { expected: "syn".into(), found: state.phase.tag().into() });
    }
    if hq_paths.is_empty() {
        return Err(AppError::EmptyCorpus(out_dir.to_path_buf()));
    }
    io::ensure_dir(&out_dir.join("clear"))?;
    io::ensure_dir(&out_dir.join("degraded"))?;

    let side = rc.train.resize_to;
    let mut records = Vec::with_capacity(hq_paths.len());
    for path in hq_paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| AppError::Config(format!("unusable file name: {}", path.display())))?;
        let hq = io::load_image(path)?.resize(side, side)?;
        let out = state.gen.forward(&batch_from_images(&[hq.clone()])?)?;
        let syn = images_from_batch(&out)?.remove(0);

        let name = format!("{stem}.png");
        io::save_image(&hq, &out_dir.join("clear").join(&name))?;
        io::save_image(&syn, &out_dir.join("degraded").join(&name))?;
        records.push(PairRecord {
            hq_path: Path::new("clear").join(&name),
            syn_path: Path::new("degraded").join(&name),
        });
    }
    dataset::write_pairs(out_dir, &records)
}

/// Restores every image under `input_dir` with a trained restoration
/// checkpoint, preserving file names and sizes. Returns how many images
/// were written.
pub fn restore_dir(ckpt: &Path, input_dir: &Path, output_dir: &Path) -> Result<usize> {
    let (state, _) = load_state(ckpt)?;
    if !matches!(state.phase, Phase::Res | Phase::ResFinetune) {
        return Err(AppError::Phase {
            expected: "res or res-finetune".into(),
            found: state.phase.tag().into(),
        });
    }
    let inputs = io::list_images(input_dir)?;
    if inputs.is_empty() {
        return Err(AppError::EmptyCorpus(input_dir.to_path_buf()));
    }
    io::ensure_dir(output_dir)?;
    for path in &inputs {
        let img = io::load_image(path)?;
        let out = state.gen.forward(&batch_from_images(&[img])?)?;
        let restored = images_from_batch(&out)?.remove(0);
        let name = path.file_name().expect("listed files have names");
        io::save_image(&restored, &output_dir.join(name))?;
    }
    Ok(inputs.len())
}
