//! Acceptance checks for the full pipeline, one test per criterion. Each
//! prints a single `ACCEPTANCE <name>: PASS/FAIL` line (visible with
//! `--nocapture`) so a run can be audited at a glance.

use catintell::cli;
use catintell::config::RunConfig;
use catintell::dataset::{make_folds, Corpus};
use catintell::evaluate;
use catintell::trainer::{Phase, TrainState};
use catintell_core::baseline::{self, Severity};
use catintell_core::discriminator::{DiscriminatorConfig, DiscriminatorModel};
use catintell_core::generator::{GeneratorConfig, GeneratorModel};
use catintell_core::gradcheck;
use catintell_core::image::{batch_from_images, images_from_batch, Image};
use catintell_core::losses::{self, LossWeights};
use catintell_core::metrics;
use catintell_core::nn::Params;
use catintell_core::optim::Adam;
use catintell_core::perceptual::{BackboneConfig, FeatureExtractor};
use catintell_core::rng;
use catintell_core::schedule::{lr_at, TrainConfig};
use catintell_core::tape::Tape;
use catintell_core::Arr;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;
use tempfile::TempDir;

fn criterion<F: FnOnce()>(name: &str, f: F) {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let dt = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => println!("ACCEPTANCE {name}: PASS ({dt:.1}s)"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL ({dt:.1}s)");
            resume_unwind(cause);
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[test]
fn loss_exactness() {
    criterion("loss-exactness", || {
        for (d, expected) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
            let a = Arr::from_elem(IxDyn(&[3, 2]), d);
            let z = Arr::zeros(IxDyn(&[3, 2]));
            let got = losses::smooth_l1(&a, &z).unwrap();
            assert!(
                (got - expected).abs() < 1e-9,
                "smooth_l1 at |d| = {d}: got {got}, expected {expected}"
            );
        }

        // All-ones components under the restoration weights, with the style
        // half zeroed: 1*1 + 0.1*(1 + 0) + 0.01*1 + 0.1*1 = 1.21.
        let report =
            losses::composite(1.0, 1.0, 0.0, 1.0, 1.0, 1.0, &LossWeights::res()).unwrap();
        assert!(
            (report.total - 1.21).abs() < 1e-9,
            "composite all-ones total: got {}",
            report.total
        );

        let bce = losses::gan_bce(&[1.0], &[0.5]).unwrap();
        assert!(
            (bce - std::f64::consts::LN_2).abs() < 1e-9,
            "gan_bce(1, 0.5): got {bce}"
        );
    });
}

// ---------------------------------------------------------------------------
// Metrics vs brute force
// ---------------------------------------------------------------------------

fn rand_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()])
}

fn brute_psnr(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.pixel(y, x)[c] - b.pixel(y, x)[c];
                sum += d * d;
            }
        }
    }
    let mse = sum / (a.height() * a.width() * 3) as f64;
    (10.0 * (1.0 / mse).log10()).min(metrics::PSNR_CAP_DB)
}

/// Direct 11x11 windowed SSIM: per-window double loops, no separable filter.
fn brute_ssim(a: &Image, b: &Image) -> f64 {
    let g: Vec<f64> = {
        let mut g = vec![0.0; 11];
        let mut sum = 0.0;
        for (i, v) in g.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
            sum += *v;
        }
        g.iter().map(|v| v / sum).collect()
    };
    let (c1, c2) = (1e-4, 9e-4);
    let (h, w) = (a.height(), a.width());
    let mut channel = [0.0; 3];
    for (c, out) in channel.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for top in 0..=(h - 11) {
            for left in 0..=(w - 11) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0);
                for wy in 0..11 {
                    for wx in 0..11 {
                        let wt = g[wy] * g[wx];
                        let va = a.pixel(top + wy, left + wx)[c];
                        let vb = b.pixel(top + wy, left + wx)[c];
                        ma += wt * va;
                        mb += wt * vb;
                        eaa += wt * va * va;
                        ebb += wt * vb * vb;
                        eab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        *out = acc / count as f64;
    }
    (channel[0] + channel[1] + channel[2]) / 3.0
}

#[test]
fn metric_oracles() {
    criterion("metric-oracles", || {
        let mut r = rng::seeded(2024);
        for trial in 0..25 {
            let a = rand_image(32, 32, &mut r);
            let b = rand_image(32, 32, &mut r);
            let dp = (metrics::psnr(&a, &b).unwrap() - brute_psnr(&a, &b)).abs();
            let ds = (metrics::ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs();
            assert!(dp < 1e-6, "psnr oracle deviation {dp} on trial {trial}");
            assert!(ds < 1e-6, "ssim oracle deviation {ds} on trial {trial}");
        }

        // Constant images: zero variance reduces SSIM to its luminance term,
        // (2*0.5*0.25 + C1) / (0.25 + 0.0625 + C1) = 0.8001...
        let a = Image::from_fn(16, 16, |_, _| [0.5; 3]);
        let b = Image::from_fn(16, 16, |_, _| [0.25; 3]);
        let got = metrics::ssim(&a, &b).unwrap();
        assert!((got - 0.8001).abs() < 1e-4, "constant-image ssim: got {got}");
    });
}

// ---------------------------------------------------------------------------
// Architecture shapes and parameter budget
// ---------------------------------------------------------------------------

#[test]
fn architecture_shapes() {
    criterion("architecture-shapes", || {
        let res = GeneratorModel::build(GeneratorConfig::res(), &mut rng::seeded(1)).unwrap();
        for (h, w) in [(256, 256), (192, 320), (100, 100)] {
            let x = Arr::from_elem(IxDyn(&[1, 3, h, w]), 0.5);
            let y = res.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape(), "restoration forward must preserve {h}x{w}");
        }

        // Encoder features after stage i: (B, 2^(i+1)*width, H/2^(i+1), ...).
        for cfg in [GeneratorConfig::res(), GeneratorConfig::syn()] {
            let side = 1 << (cfg.stages + 2);
            let model = GeneratorModel::build(cfg.clone(), &mut rng::seeded(2)).unwrap();
            let x = Arr::from_elem(IxDyn(&[1, 3, side, side]), 0.5);
            let trace = model.encoder_trace(&x).unwrap();
            assert_eq!(trace.len(), cfg.stages);
            for (i, feat) in trace.iter().enumerate() {
                let scale = 1 << (i + 1);
                assert_eq!(
                    feat.shape(),
                    &[1, scale * cfg.width, side / scale, side / scale],
                    "stage {i} of the {}-stage config",
                    cfg.stages
                );
            }
        }
    });
}

#[test]
fn parameter_budget() {
    criterion("parameter-budget", || {
        let res = GeneratorModel::build(GeneratorConfig::res(), &mut rng::seeded(1)).unwrap();
        let syn = GeneratorModel::build(GeneratorConfig::syn(), &mut rng::seeded(1)).unwrap();
        let (nr, ns) = (res.param_count(), syn.param_count());
        assert!(
            (8_000_000..=18_000_000).contains(&nr),
            "restoration generator has {nr} parameters, outside [8M, 18M]"
        );
        assert!(ns < nr, "synthesis generator ({ns}) should be smaller than restoration ({nr})");
        println!("  restoration params: {nr}, synthesis params: {ns}");
    });
}

// ---------------------------------------------------------------------------
// Gradient correctness
// ---------------------------------------------------------------------------

struct TinyRig {
    gen: GeneratorModel,
    disc: DiscriminatorModel,
    backbone: FeatureExtractor,
    input: Arr,
    reference: Arr,
    real: Arr,
    weights: LossWeights,
}

fn tiny_rig() -> TinyRig {
    let gen_cfg = GeneratorConfig {
        stages: 1,
        width: 4,
        blocks_per_encoder_stage: 1,
        blocks_per_decoder_stage: 1,
        bottleneck_blocks: 1,
        kernel_large: 3,
        conv_groups: 1,
        io_channels: 3,
    };
    let disc_cfg = DiscriminatorConfig {
        stages: 2,
        embed_dim: 4,
        window: 2,
        patch_embed: 2,
        heads_per_stage: vec![1, 2],
        blocks_per_stage: 1,
    };
    let bb_cfg = BackboneConfig { widths: vec![4, 8], convs_per_block: 1, classes: 3 };
    let gen = GeneratorModel::build(gen_cfg, &mut rng::seeded(11)).unwrap();
    let disc = DiscriminatorModel::build(disc_cfg, &mut rng::seeded(12)).unwrap();
    let mut backbone = FeatureExtractor::build(bb_cfg, &mut rng::seeded(13)).unwrap();
    backbone.freeze();

    let mut r = rng::seeded(14);
    let mut batch =
        || Arr::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| 0.05 + 0.9 * r.gen::<f64>());
    TinyRig {
        gen,
        disc,
        backbone,
        input: batch(),
        reference: batch(),
        real: batch(),
        weights: LossWeights::res(),
    }
}

/// The generator's composite objective as one scalar, optionally with
/// gradients for the generator parameters (in parameter-store order).
fn g_objective(rig: &TinyRig, gen: &GeneratorModel, grads: bool) -> (f64, Option<Vec<Option<Arr>>>) {
    let mut tape = if grads { Tape::new() } else { Tape::new_no_grad() };
    let bind_g = gen.bind(&mut tape);
    let input_n = tape.constant(rig.input.clone());
    let fake = gen.forward_t(&mut tape, &bind_g, input_n);

    let ref_n = tape.constant(rig.reference.clone());
    let pixel = tape.smooth_l1_mean(fake, ref_n);

    let ref_taps = rig.backbone.features_eval(&rig.reference).unwrap();
    let bind_b = rig.backbone.bind(&mut tape);
    let (fp, style) = rig.backbone.fp_terms_t(&mut tape, &bind_b, fake, &ref_taps);

    let id_in = tape.constant(rig.reference.clone());
    let id_out = gen.forward_t(&mut tape, &bind_g, id_in);
    let identity = tape.smooth_l1_mean(id_out, id_in);

    let bind_d = rig.disc.bind(&mut tape);
    let logits = rig.disc.forward_t(&mut tape, &bind_d, fake);
    let ones = Arr::from_elem(IxDyn(&[1]), 1.0);
    let gan = tape.bce_logits_mean(logits, &ones);

    let w = &rig.weights;
    let total = tape.weighted_sum(&[
        (pixel, w.pixel),
        (fp, w.fp),
        (style, w.fp),
        (identity, w.identity),
        (gan, w.gan),
    ]);
    let value = tape.scalar(total);
    if !grads {
        return (value, None);
    }
    let mut g = tape.backward(total);
    let per = bind_g.nodes().iter().map(|&n| g.take(n)).collect();
    (value, Some(per))
}

/// The discriminator's objective (real toward 1, generated toward 0),
/// optionally with gradients for the discriminator parameters.
fn d_objective(
    rig: &TinyRig,
    disc: &DiscriminatorModel,
    fake: &Arr,
    grads: bool,
) -> (f64, Option<Vec<Option<Arr>>>) {
    let mut tape = if grads { Tape::new() } else { Tape::new_no_grad() };
    let bind_d = disc.bind(&mut tape);
    let real_n = tape.constant(rig.real.clone());
    let fake_n = tape.constant(fake.clone());
    let lr_real = disc.forward_t(&mut tape, &bind_d, real_n);
    let lr_fake = disc.forward_t(&mut tape, &bind_d, fake_n);
    let ones = Arr::from_elem(IxDyn(&[1]), 1.0);
    let zeros = Arr::zeros(IxDyn(&[1]));
    let b_real = tape.bce_logits_mean(lr_real, &ones);
    let b_fake = tape.bce_logits_mean(lr_fake, &zeros);
    let total = tape.weighted_sum(&[(b_real, 0.5), (b_fake, 0.5)]);
    let value = tape.scalar(total);
    if !grads {
        return (value, None);
    }
    let mut g = tape.backward(total);
    let per = bind_d.nodes().iter().map(|&n| g.take(n)).collect();
    (value, Some(per))
}

fn with_params<M: Clone>(template: &M, p: &Params, params_of: impl Fn(&mut M) -> &mut Params) -> M {
    let mut m = template.clone();
    let store = params_of(&mut m);
    for i in 0..p.len() {
        store.set_value(i, p.value_at(i).clone()).unwrap();
    }
    m
}

#[test]
fn gradient_correctness() {
    criterion("gradient-correctness", || {
        let rig = tiny_rig();

        // Generator side.
        let mut store = rig.gen.params().clone();
        let coords = gradcheck::sample_coords(&store, 200, &mut rng::seeded(21));
        let stats = gradcheck::check_coords(
            &mut store,
            &coords,
            1e-3,
            1e-3,
            1e-6,
            &mut |p| g_objective(&rig, &with_params(&rig.gen, p, |m| m.params_mut()), false).0,
            &mut |p| {
                g_objective(&rig, &with_params(&rig.gen, p, |m| m.params_mut()), true).1.unwrap()
            },
        );
        println!(
            "  generator: {}/{} coords within 1e-3 (worst {:.2e})",
            stats.within, stats.checked, stats.worst
        );
        assert!(
            stats.pass_fraction() >= 0.95,
            "generator gradients: only {}/{} within tolerance",
            stats.within,
            stats.checked
        );

        // Discriminator side, on a frozen generated batch.
        let fake = rig.gen.forward_eval_unclamped(&rig.input).unwrap();
        let mut store = rig.disc.params().clone();
        let coords = gradcheck::sample_coords(&store, 200, &mut rng::seeded(22));
        let stats = gradcheck::check_coords(
            &mut store,
            &coords,
            1e-3,
            1e-3,
            1e-6,
            &mut |p| {
                d_objective(&rig, &with_params(&rig.disc, p, |m| m.params_mut()), &fake, false).0
            },
            &mut |p| {
                d_objective(&rig, &with_params(&rig.disc, p, |m| m.params_mut()), &fake, true)
                    .1
                    .unwrap()
            },
        );
        println!(
            "  discriminator: {}/{} coords within 1e-3 (worst {:.2e})",
            stats.within, stats.checked, stats.worst
        );
        assert!(
            stats.pass_fraction() >= 0.95,
            "discriminator gradients: only {}/{} within tolerance",
            stats.within,
            stats.checked
        );
    });
}

// ---------------------------------------------------------------------------
// Fold protocol
// ---------------------------------------------------------------------------

fn synthetic_corpus(n_hq: usize, n_cat: usize) -> Corpus {
    Corpus {
        root: PathBuf::from("mem"),
        hq: (0..n_hq).map(|i| PathBuf::from(format!("mem/hq/{i:05}.png"))).collect(),
        cataract: (0..n_cat).map(|i| PathBuf::from(format!("mem/cat/{i:05}.png"))).collect(),
    }
}

#[test]
fn fold_protocol() {
    criterion("fold-protocol", || {
        // The published corpus sizes must reproduce the documented split:
        // nine folds with (244, 114) held out and a final (240, 118).
        let corpus = synthetic_corpus(2436, 1144);
        let folds = make_folds(&corpus, 7).unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds[..9] {
            assert_eq!((f.val_hq.len(), f.val_cat.len()), (244, 114));
        }
        assert_eq!((folds[9].val_hq.len(), folds[9].val_cat.len()), (240, 118));

        // Partition properties across random corpus sizes and seeds.
        let mut r = rng::seeded(99);
        for _ in 0..50 {
            let n_hq = r.gen_range(10..800);
            let n_cat = r.gen_range(10..800);
            let seed = r.gen::<u64>();
            let corpus = synthetic_corpus(n_hq, n_cat);
            let folds = make_folds(&corpus, seed).unwrap();
            assert_eq!(folds.len(), 10);

            let mut seen_hq = std::collections::BTreeSet::new();
            let mut seen_cat = std::collections::BTreeSet::new();
            for f in &folds {
                // Validation sets are disjoint across folds...
                for p in &f.val_hq {
                    assert!(seen_hq.insert(p.clone()), "hq {p:?} validated twice");
                }
                for p in &f.val_cat {
                    assert!(seen_cat.insert(p.clone()), "cataract {p:?} validated twice");
                }
                // ...and each fold is an exact partition of its class.
                assert_eq!(f.train_hq.len() + f.val_hq.len(), n_hq);
                assert_eq!(f.train_cat.len() + f.val_cat.len(), n_cat);
                let mut all: Vec<_> = f.train_hq.iter().chain(&f.val_hq).collect();
                all.sort();
                all.dedup();
                assert_eq!(all.len(), n_hq, "fold mixes or drops hq entries");
            }
            // The union of validation folds covers every image exactly once.
            assert_eq!(seen_hq.len(), n_hq);
            assert_eq!(seen_cat.len(), n_cat);
        }
    });
}

// ---------------------------------------------------------------------------
// Single-pair overfit
// ---------------------------------------------------------------------------

#[test]
fn single_pair_overfit() {
    criterion("single-pair-overfit", || {
        // Memorization probe: the small restoration generator and a plain
        // Adam loop must drive a single 64x64 pair to high fidelity within
        // 500 supervised steps. Adversarial terms are deliberately left out;
        // this isolates the generator's capacity and gradient quality.
        let rc = RunConfig::desk();

        let mut r = rng::seeded(31);
        let clear = baseline::render_toy_fundus(64, &mut r).unwrap();
        let degraded = baseline::degrade(&clear, &Severity::Medium.params()).unwrap();
        let input = batch_from_images(&[degraded.clone()]).unwrap();
        let reference = batch_from_images(&[clear.clone()]).unwrap();

        let mut state = TrainState::new(Phase::Res, &rc).unwrap();
        // A short horizon rewards a fast-adapting second moment, hence the
        // unusually low beta2 and high step size.
        let mut opt = Adam::new(state.gen.params(), 0.9, 0.9);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bind = state.gen.bind(&mut tape);
            let x = tape.constant(input.clone());
            let fake = state.gen.forward_t(&mut tape, &bind, x);
            let target = tape.constant(reference.clone());
            let pixel = tape.smooth_l1_mean(fake, target);
            let mut grads = tape.backward(pixel);
            let per: Vec<_> = bind.nodes().iter().map(|&n| grads.take(n)).collect();
            opt.step(state.gen.params_mut(), &per, 5e-3).unwrap();
        }

        let restored = images_from_batch(&state.gen.forward(&input).unwrap()).unwrap().remove(0);
        let before = metrics::psnr(&degraded, &clear).unwrap();
        let after = metrics::psnr(&restored, &clear).unwrap();
        println!("  degraded {before:.2} dB -> restored {after:.2} dB after 500 iterations");
        assert!(after >= 30.0, "single-pair overfit reached only {after:.2} dB");
    });
}

// ---------------------------------------------------------------------------
// End-to-end pipeline + determinism (shared two-run fixture)
// ---------------------------------------------------------------------------

struct PipelineRuns {
    _guard: TempDir,
    runs: [PathBuf; 2],
    pipeline_seconds: f64,
}

static RUNS: OnceLock<Result<PipelineRuns, String>> = OnceLock::new();

fn cli_ok(args: &[&str]) {
    let mut argv = vec!["catintell"];
    argv.extend_from_slice(args);
    let code = cli::run(argv.clone());
    assert_eq!(code, 0, "command failed: {argv:?}");
}

fn run_pipeline(base: &Path, which: usize) -> PathBuf {
    let data = base.join("data");
    let hold = base.join("holdout");
    let run = base.join(format!("run{which}"));
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    cli_ok(&["train-syn", "--data", &s(&data), "--run-dir", &s(&run), "--profile", "desk"]);
    // Pairs for restoration training from the training corpus, plus pairs
    // from the held-out clear images for the final evaluation.
    for (hq_dir, out) in [(data.join("hq"), "pairs"), (hold.join("hq"), "holdout_pairs")] {
        cli_ok(&[
            "synthesize",
            "--ckpt",
            &s(&run.join("syn.ckpt")),
            "--hq",
            &s(&hq_dir),
            "--out",
            &s(&run.join(out)),
        ]);
    }
    cli_ok(&[
        "train-res",
        "--pairs",
        &s(&run.join("pairs").join("pairs.tsv")),
        "--run-dir",
        &s(&run),
        "--profile",
        "desk",
    ]);
    cli_ok(&[
        "finetune-res",
        "--ckpt",
        &s(&run.join("res.ckpt")),
        "--pairs",
        &s(&run.join("pairs").join("pairs.tsv")),
        "--run-dir",
        &s(&run),
        "--profile",
        "desk",
    ]);
    let hold_pairs = run.join("holdout_pairs");
    cli_ok(&[
        "restore",
        "--input",
        &s(&hold_pairs.join("degraded")),
        "--ckpt",
        &s(&run.join("res_finetuned.ckpt")),
        "--output",
        &s(&run.join("restored")),
    ]);
    for (pred, out) in
        [(hold_pairs.join("degraded"), "eval_degraded"), (run.join("restored"), "eval_restored")]
    {
        cli_ok(&[
            "evaluate",
            "--pred",
            &s(&pred),
            "--target",
            &s(&hold_pairs.join("clear")),
            "--out",
            &s(&run.join(out)),
        ]);
    }
    run
}

fn pipeline_runs() -> &'static PipelineRuns {
    let result = RUNS.get_or_init(|| {
        catch_unwind(|| {
            let guard = TempDir::new().unwrap();
            let base = guard.path().to_path_buf();
            let s = |p: &Path| p.to_str().unwrap().to_owned();

            // Shared inputs: a 20-image training corpus and 5 held-out
            // clear images from a different seed.
            cli_ok(&["make-toy", "--out", &s(&base.join("data")), "--count", "20", "--seed", "17", "--size", "256"]);
            cli_ok(&["make-toy", "--out", &s(&base.join("holdout")), "--count", "5", "--seed", "99", "--size", "128"]);

            let t0 = Instant::now();
            let run0 = run_pipeline(&base, 0);
            let pipeline_seconds = t0.elapsed().as_secs_f64();
            let run1 = run_pipeline(&base, 1);
            PipelineRuns { _guard: guard, runs: [run0, run1], pipeline_seconds }
        })
        .map_err(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "pipeline panicked".into());
            format!("pipeline fixture failed: {msg}")
        })
    });
    match result {
        Ok(runs) => runs,
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn end_to_end_pipeline() {
    criterion("end-to-end-pipeline", || {
        let runs = pipeline_runs();
        let run = &runs.runs[0];
        let clear = run.join("holdout_pairs").join("clear");

        let degraded =
            evaluate::evaluate(&run.join("holdout_pairs").join("degraded"), &clear).unwrap();
        let restored = evaluate::evaluate(&run.join("restored"), &clear).unwrap();
        println!(
            "  degraded {:.2} dB / ssim {:.4}  ->  restored {:.2} dB / ssim {:.4}  ({:.0}s pipeline)",
            degraded.mean_psnr,
            degraded.mean_ssim,
            restored.mean_psnr,
            restored.mean_ssim,
            runs.pipeline_seconds
        );
        assert!(
            restored.mean_psnr >= degraded.mean_psnr + 1.0,
            "restoration gained only {:.2} dB",
            restored.mean_psnr - degraded.mean_psnr
        );
        assert!(
            restored.mean_ssim > degraded.mean_ssim,
            "ssim did not improve: {:.4} vs {:.4}",
            restored.mean_ssim,
            degraded.mean_ssim
        );
        assert!(
            runs.pipeline_seconds <= 1800.0,
            "pipeline took {:.0}s, over the 30-minute budget",
            runs.pipeline_seconds
        );
    });
}

#[test]
fn determinism() {
    criterion("determinism", || {
        let runs = pipeline_runs();
        let [a, b] = &runs.runs;

        let mut files = vec![
            "syn.ckpt".to_owned(),
            "res.ckpt".to_owned(),
            "res_finetuned.ckpt".to_owned(),
            "train_log_syn.csv".to_owned(),
            "train_log_res.csv".to_owned(),
            "train_log_res-finetune.csv".to_owned(),
            "pairs/pairs.tsv".to_owned(),
            "holdout_pairs/pairs.tsv".to_owned(),
            "eval_degraded/report.csv".to_owned(),
            "eval_restored/report.csv".to_owned(),
            "eval_restored/report.txt".to_owned(),
        ];
        // Every synthesized pair and every restored image.
        for dir in ["pairs/clear", "pairs/degraded", "holdout_pairs/degraded", "restored"] {
            let mut names: Vec<_> = std::fs::read_dir(a.join(dir))
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .filter(|n| n.ends_with(".png"))
                .collect();
            names.sort();
            files.extend(names.into_iter().map(|n| format!("{dir}/{n}")));
        }

        for rel in files {
            let x = std::fs::read(a.join(&rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
            let y = std::fs::read(b.join(&rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
            assert!(x == y, "{rel} differs between identically-seeded runs");
        }
    });
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

#[test]
fn lr_schedule() {
    criterion("lr-schedule", || {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.iterations, 80_000);
        assert_eq!(cfg.warmup_iters, 1_000);

        // Warmup peaks exactly at the base rate, then cosine-decays to zero.
        assert!((lr_at(&cfg, 1_000).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 80_000).unwrap(), 0.0);
        assert!((lr_at(&cfg, 500).unwrap() - 5e-6).abs() < 1e-18, "linear warmup midpoint");
        let mid = lr_at(&cfg, 40_500).unwrap();
        assert!((mid - 5e-6).abs() < 1e-15, "cosine midpoint: got {mid}");
        assert!(lr_at(&cfg, 80_001).is_err(), "steps beyond the horizon must fail");

        // Fine-tune phase: 1e-6 with linear decay to zero.
        let ft = cfg.finetune_schedule().unwrap();
        assert!((lr_at(&ft, 0).unwrap() - 1e-6).abs() < 1e-18);
        let ft_mid = lr_at(&ft, ft.iterations / 2).unwrap();
        assert!((ft_mid - 5e-7).abs() < 1e-15, "linear midpoint: got {ft_mid}");
        assert_eq!(lr_at(&ft, ft.iterations).unwrap(), 0.0);
    });
}
