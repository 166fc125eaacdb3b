use super::*;
use crate::pipeline::Time;
use crate::synth::RegionSplit;

fn spec_256x512(name: &str, seed: u64) -> SceneSpec {
    SceneSpec {
        name: name.to_string(),
        seed,
        height: 256,
        width: 512,
        n_segments: 6,
        change_fraction: 0.3,
        speckle_looks: 4.0,
        palette: Default::default(),
        split: RegionSplit::VerticalFraction { train_frac: 0.5 },
        texture_amp: 0.02,
    }
}

fn spec_all_train(name: &str, seed: u64) -> SceneSpec {
    SceneSpec {
        split: RegionSplit::AllTrain,
        width: 256,
        ..spec_256x512(name, seed)
    }
}

#[test]
fn outdir_ensure_creates_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path().join("run"));
    out.ensure().unwrap();
    for dir in [
        out.scenes(),
        out.manifests(),
        out.checkpoints(),
        out.mosaics(),
        out.reports(),
    ] {
        assert!(dir.is_dir(), "{} missing", dir.display());
    }
}

#[test]
fn scene_roundtrip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let quartet = generate_scene(&spec_256x512("alpha", 11)).unwrap();
    save_scene(&out, &quartet).unwrap();
    let back = load_scene(&out, "alpha").unwrap();
    assert_eq!(back.name, quartet.name);
    assert_eq!(back.train_region, quartet.train_region);
    assert_eq!(back.test_region, quartet.test_region);
    for (a, b) in [
        (&back.s1, &quartet.s1),
        (&back.o1, &quartet.o1),
        (&back.s2, &quartet.s2),
        (&back.o2, &quartet.o2),
    ] {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.bands(), b.bands());
        assert_eq!(a.value_domain(), b.value_domain());
    }
}

#[test]
fn scene_names_are_restricted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let err = load_scene(&out, "../alpha").err().expect("path-like name");
    assert!(err.to_string().contains("label"), "{err}");
}

#[test]
fn manifest_roundtrip_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let quartet = generate_scene(&spec_256x512("alpha", 11)).unwrap();
    let manifest = Manifest::build(&[&quartet]);
    assert_eq!(manifest.patch, PATCH);
    assert_eq!(manifest.counts(), (1, 1));
    assert_eq!(
        manifest.scene_names().into_iter().collect::<Vec<_>>(),
        vec!["alpha".to_string()]
    );
    let path = out.manifests().join("m.json");
    manifest.save(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), manifest);
}

#[test]
fn method_names_map_to_task_and_method() {
    let cases = [
        (MethodName::Cnn, "CNN", Task::A, Method::Cnn),
        (MethodName::Cgan, "cGAN", Task::A, Method::Cgan),
        (MethodName::Mtcnn, "MTCNN", Task::B, Method::Cnn),
        (MethodName::Mtcgan, "MTcGAN", Task::B, Method::Cgan),
    ];
    for (name, label, task, method) in cases {
        assert_eq!(name.label(), label);
        assert_eq!(name.task(), task);
        assert_eq!(name.method(), method);
        let json = serde_json::to_string(&name).unwrap();
        assert_eq!(json, format!("{label:?}"));
        assert_eq!(serde_json::from_str::<MethodName>(&json).unwrap(), name);
    }
}

#[test]
fn build_train_config_applies_preset_and_overrides() {
    let config = build_train_config(MethodName::Mtcgan, Preset::Mini, 7, 42, 3, true);
    assert_eq!(config.task, Task::B);
    assert_eq!(config.method, Method::Cgan);
    assert_eq!(config.generator.in_channels, 8);
    assert_eq!(config.discriminator.in_channels, 12);
    assert_eq!(config.epochs, 7);
    assert_eq!(config.seed, 42);
    assert_eq!(config.checkpoint_every, 3);
    assert!(config.include_t1_pairs);
    config.validate().unwrap();

    let standard = build_train_config(MethodName::Cnn, Preset::Standard, 200, 1, 50, false);
    assert_eq!(standard.generator.in_channels, 2);
    assert_eq!(standard.generator, crate::net::GeneratorArch::standard(2));
    standard.validate().unwrap();

    let small = build_train_config(MethodName::Cgan, Preset::Small, 200, 1, 50, false);
    assert_eq!(small.generator, crate::net::GeneratorArch::small(2));
    small.validate().unwrap();
}

#[test]
fn assemble_pairs_respects_split_and_task() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let quartet = generate_scene(&spec_256x512("alpha", 11)).unwrap();
    save_scene(&out, &quartet).unwrap();
    let manifest = Manifest::build(&[&quartet]);
    let (_, normalized) = prepare_scenes(&out, &manifest).unwrap();

    let task_b = assemble_pairs(&normalized, &manifest, Task::B, false).unwrap();
    assert_eq!(task_b.len(), 1);
    assert_eq!(task_b[0].input.shape()[0], 8);

    let task_a = assemble_pairs(&normalized, &manifest, Task::A, false).unwrap();
    assert_eq!(task_a.len(), 1);
    assert_eq!(task_a[0].input.shape()[0], 2);

    // T1 pairs come from every tile of the scene, test split included.
    let task_a_t1 = assemble_pairs(&normalized, &manifest, Task::A, true).unwrap();
    assert_eq!(task_a_t1.len(), 3);
    let t1 = task_a_t1
        .iter()
        .zip(enumerate_pairs(&manifest.records, Task::A, true))
        .filter(|(_, r)| r.time == Time::T1)
        .count();
    assert_eq!(t1, 2);
}

fn fake_report(method: &str, psnr: f64, ssim: f64, msa: f64, baseline: bool) -> MetricsReport {
    MetricsReport {
        method: method.to_string(),
        psnr_db: vec![Psnr::Db(psnr); 4],
        psnr_mean: Psnr::Db(psnr),
        ssim: vec![ssim; 4],
        ssim_mean: ssim,
        msa_radians: msa,
        pixels: 65536,
        msa_skipped_pixels: 0,
        baseline,
    }
}

#[test]
fn render_table_marks_best_per_row() {
    let base = fake_report("O1 baseline", 14.0, 0.5, 0.31, true);
    let records = vec![
        EvalRecord {
            scene: "alpha".into(),
            report: fake_report("CNN", 17.0, 0.62, 0.22, false),
            baseline: base.clone(),
        },
        EvalRecord {
            scene: "alpha".into(),
            report: fake_report("MTcGAN", 19.5, 0.71, 0.18, false),
            baseline: base.clone(),
        },
    ];
    let table = render_table(&records);
    assert!(table.contains("O1 baseline"), "{table}");
    assert!(table.contains("19.50*"), "{table}");
    assert!(table.contains("0.7100*"), "{table}");
    assert!(table.contains("0.1800*"), "{table}");
    assert!(!table.contains("17.00*"), "{table}");
    assert!(!table.contains("14.00*"), "{table}");

    // Disagreeing baselines drop the baseline column.
    let mut other = records.clone();
    other[1].baseline = fake_report("O1 baseline", 13.0, 0.4, 0.4, true);
    let table = render_table(&other);
    assert!(!table.contains("O1 baseline"), "{table}");
}

#[test]
fn experiment_spec_validation_rejects_bad_wiring() {
    let mut spec = ExperimentSpec {
        label: "case1".into(),
        scenes: vec![spec_all_train("alpha", 1), spec_256x512("beta", 2)],
        train_scenes: vec!["alpha".into()],
        test_scene: "beta".into(),
        methods: vec![MethodName::Mtcnn],
        seed: 9,
        preset: Preset::Mini,
        epochs: 1,
        checkpoint_every: 50,
        include_t1_pairs: false,
    };
    spec.validate().unwrap();

    let mut bad = spec.clone();
    bad.scenes.push(spec_all_train("alpha", 3));
    assert!(bad.validate().is_err());

    let mut bad = spec.clone();
    bad.test_scene = "gamma".into();
    assert!(bad.validate().is_err());

    // alpha is all-train, so it cannot serve as the test target.
    let mut bad = spec.clone();
    bad.test_scene = "alpha".into();
    let err = bad.validate().err().expect("all-train test scene");
    assert!(err.to_string().contains("no test tiles"), "{err}");

    let mut bad = spec.clone();
    bad.train_scenes = vec![];
    assert!(bad.validate().is_err());

    let mut bad = spec.clone();
    bad.methods = vec![MethodName::Cnn, MethodName::Cnn];
    assert!(bad.validate().is_err());

    spec.label = "no spaces allowed".into();
    assert!(spec.validate().is_err());
}

#[test]
fn mini_experiment_runs_end_to_end_and_is_rerunnable() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        label: "mini".into(),
        scenes: vec![spec_256x512("alpha", 11)],
        train_scenes: vec!["alpha".into()],
        test_scene: "alpha".into(),
        methods: vec![MethodName::Mtcnn],
        seed: 5,
        preset: Preset::Mini,
        epochs: 2,
        checkpoint_every: 50,
        include_t1_pairs: false,
    };

    let out_a = OutDir::new(tmp.path().join("a"));
    let outcome = run_experiment(&spec, &out_a, false).unwrap();
    assert_eq!(outcome.records.len(), 1);
    let record = &outcome.records[0];
    assert_eq!(record.report.method, "MTCNN");
    assert_eq!(record.baseline.method, "O1 baseline");
    assert!(record.baseline.baseline);
    assert_eq!(record.report.pixels, PATCH * PATCH);
    assert!(outcome.table.contains("MTCNN"), "{}", outcome.table);

    // Stored artifacts match the returned outcome.
    let stored = EvalRecord::load(&out_a.reports().join("mini-MTCNN.json")).unwrap();
    assert_eq!(&stored, record);
    let table_file = std::fs::read_to_string(out_a.reports().join("mini-table.txt")).unwrap();
    assert_eq!(table_file, outcome.table);

    // A second run from the same spec reproduces every artifact bitwise.
    let out_b = OutDir::new(tmp.path().join("b"));
    run_experiment(&spec, &out_b, false).unwrap();
    for rel in [
        "scenes/alpha-o2.ras1",
        "manifests/mini-train.json",
        "checkpoints/mini-MTCNN/curve.csv",
        "checkpoints/mini-MTCNN/epoch-0002.ckp1",
        "mosaics/mini-MTCNN.ras1",
        "mosaics/mini-MTCNN.coverage.ras1",
        "reports/mini-MTCNN.json",
        "reports/mini-table.txt",
    ] {
        let a = std::fs::read(out_a.root().join(rel)).unwrap();
        let b = std::fs::read(out_b.root().join(rel)).unwrap();
        assert_eq!(a, b, "artifact {rel} differs between reruns");
    }

    // Mosaics over the train split leave test tiles uncovered.
    let ckpt = final_checkpoint_path(&out_a, "mini-MTCNN", 2);
    run_inference(&out_a, &ckpt, "alpha", Split::Train, "trainside").unwrap();
    let err = run_evaluation(&out_a, "trainside", "alpha", "MTCNN")
        .err()
        .expect("uncovered test tiles must fail");
    assert!(err.to_string().contains("does not cover"), "{err}");
}
