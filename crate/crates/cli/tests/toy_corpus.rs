use catintell::error::AppError;
use catintell::toy;
use catintell::{dataset, io};
use catintell_core::baseline::Severity;
use catintell_core::metrics::psnr;
use std::fs;

#[test]
fn corpus_layout_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy::make_toy_corpus(3, 5, 48, dir.path()).unwrap();
    assert_eq!(corpus.hq_count, 3);
    assert_eq!(corpus.degraded_count, 9);

    let scanned = dataset::scan_corpus(dir.path(), "hq", "cataract").unwrap();
    assert_eq!(scanned.hq.len(), 3);
    assert_eq!(scanned.cataract.len(), 9);

    let rows = toy::read_quality_manifest(&corpus.quality_manifest).unwrap();
    assert_eq!(rows.len(), 12);
    // One clear row per image, two usable tiers, one reject tier.
    assert_eq!(rows.iter().filter(|(_, c)| *c == 0).count(), 3);
    assert_eq!(rows.iter().filter(|(_, c)| *c == 1).count(), 6);
    assert_eq!(rows.iter().filter(|(_, c)| *c == 2).count(), 3);
    for (path, _) in &rows {
        assert!(path.is_file());
    }
}

#[test]
fn generation_is_byte_identical_for_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy::make_toy_corpus(2, 9, 32, a.path()).unwrap();
    toy::make_toy_corpus(2, 9, 32, b.path()).unwrap();

    for rel in ["hq/toy_000.png", "hq/toy_001.png", "cataract/toy_000_severe.png", "quality.tsv"] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel} differs between identically seeded runs"
        );
    }

    let c = tempfile::tempdir().unwrap();
    toy::make_toy_corpus(2, 10, 32, c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("hq/toy_000.png")).unwrap(),
        fs::read(c.path().join("hq/toy_000.png")).unwrap()
    );
}

#[test]
fn severity_tiers_strictly_lower_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    toy::make_toy_corpus(4, 21, 48, dir.path()).unwrap();
    for i in 0..4 {
        let hq = io::load_image(&dir.path().join(format!("hq/toy_{i:03}.png"))).unwrap();
        let tier = |sev: &str| {
            let img =
                io::load_image(&dir.path().join(format!("cataract/toy_{i:03}_{sev}.png"))).unwrap();
            psnr(&img, &hq).unwrap()
        };
        let (mild, medium, severe) = (tier("mild"), tier("medium"), tier("severe"));
        assert!(mild > medium && medium > severe, "tiers not ordered: {mild} {medium} {severe}");
    }
}

#[test]
fn zero_images_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        toy::make_toy_corpus(0, 0, 32, dir.path()),
        Err(AppError::Config(_))
    ));
}

#[test]
fn manifest_rejects_unknown_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("x.png");
    io::save_image(
        &catintell_core::image::Image::from_fn(4, 4, |_, _| [0.2, 0.2, 0.2]),
        &img_path,
    )
    .unwrap();
    let manifest = dir.path().join("quality.tsv");
    fs::write(&manifest, "x.png\tgood\n").unwrap();
    assert_eq!(toy::read_quality_manifest(&manifest).unwrap(), vec![(img_path, 0)]);

    fs::write(&manifest, "x.png\tpristine\n").unwrap();
    assert!(matches!(toy::read_quality_manifest(&manifest), Err(AppError::Config(_))));
    fs::write(&manifest, "x.png good\n").unwrap();
    assert!(matches!(toy::read_quality_manifest(&manifest), Err(AppError::Config(_))));
}

#[test]
fn degrade_dir_processes_every_image_under_the_same_name() {
    let dir = tempfile::tempdir().unwrap();
    toy::make_toy_corpus(2, 3, 32, dir.path()).unwrap();
    let out = dir.path().join("degraded");
    let n = toy::degrade_dir(&dir.path().join("hq"), &out, Severity::Medium).unwrap();
    assert_eq!(n, 2);
    let names: Vec<_> = io::list_images(&out)
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_os_string())
        .collect();
    assert_eq!(names, ["toy_000.png", "toy_001.png"]);

    let empty = dir.path().join("nothing");
    fs::create_dir(&empty).unwrap();
    assert!(matches!(
        toy::degrade_dir(&empty, &out, Severity::Mild),
        Err(AppError::EmptyCorpus(_))
    ));
}
