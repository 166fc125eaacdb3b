//! End-to-end coverage of the binary: every subcommand, the exit-code
//! contract, and byte-identical reruns.

use mtfuse::experiment::{EvalRecord, OutDir};
use mtfuse::raster::{optical_bands, sar_bands, save_raster, validate_quartet, Raster, ValueDomain};
use mtfuse::synth::{generate_scene, RegionSplit, SceneSpec};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtfuse"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn mtfuse");
    assert!(
        out.status.success(),
        "mtfuse {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn mtfuse");
    assert!(!out.status.success(), "mtfuse {args:?} unexpectedly passed");
    out
}

fn scene_spec(name: &str, seed: u64) -> SceneSpec {
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

fn write_spec(path: &Path, spec: &SceneSpec) {
    spec.save(path).unwrap();
}

#[test]
fn synth_reruns_bitwise_and_seed_changes_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let spec_path = tmp.path().join("alpha.json");
    write_spec(&spec_path, &scene_spec("alpha", 11));
    let spec_str = spec_path.to_str().unwrap();

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let stdout = run_ok(&["synth", "--config", spec_str, "--out", out_a.to_str().unwrap()]);
    assert_eq!(stdout, "scene alpha: 256x512, 1 train tiles, 1 test tiles\n");
    run_ok(&["synth", "--config", spec_str, "--out", out_b.to_str().unwrap()]);
    for file in [
        "alpha-s1.ras1",
        "alpha-o1.ras1",
        "alpha-s2.ras1",
        "alpha-o2.ras1",
        "alpha.scene.json",
        "alpha.spec.json",
    ] {
        let a = std::fs::read(out_a.join("scenes").join(file)).unwrap();
        let b = std::fs::read(out_b.join("scenes").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }

    // A different seed must change the pixel payload.
    let out_c = tmp.path().join("c");
    run_ok(&[
        "synth", "--config", spec_str,
        "--out", out_c.to_str().unwrap(),
        "--seed", "12",
    ]);
    let a = std::fs::read(out_a.join("scenes/alpha-o2.ras1")).unwrap();
    let c = std::fs::read(out_c.join("scenes/alpha-o2.ras1")).unwrap();
    assert_ne!(a, c, "seed override left the payload unchanged");
}

#[test]
fn patchify_counts_tiles_and_accepts_tileless_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let out_str = tmp.path().to_str().unwrap();

    let spec_path = tmp.path().join("solo.json");
    write_spec(
        &spec_path,
        &SceneSpec {
            width: 256,
            split: RegionSplit::AllTrain,
            ..scene_spec("solo", 3)
        },
    );
    run_ok(&["synth", "--config", spec_path.to_str().unwrap(), "--out", out_str]);
    let stdout = run_ok(&["patchify", "--out", out_str, "--label", "m", "--scene", "solo"]);
    assert_eq!(stdout, "manifest m: 1 train tiles, 0 test tiles from 1 scenes\n");

    // A 255x255 quartet holds no full tile; the manifest is empty but valid.
    let zeros = |bands: Vec<String>, domain| Raster::zeros(255, 255, bands, domain);
    let quartet = validate_quartet(
        "small",
        zeros(sar_bands(), ValueDomain::Raw),
        zeros(optical_bands(), ValueDomain::Reflectance01),
        zeros(sar_bands(), ValueDomain::Raw),
        zeros(optical_bands(), ValueDomain::Reflectance01),
        vec![],
        vec![],
    )
    .unwrap();
    mtfuse::experiment::save_scene(&out, &quartet).unwrap();
    let stdout = run_ok(&["patchify", "--out", out_str, "--label", "none", "--scene", "small"]);
    assert_eq!(stdout, "manifest none: 0 train tiles, 0 test tiles from 1 scenes\n");
}

#[test]
fn train_infer_evaluate_report_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let out_str = tmp.path().to_str().unwrap();
    let spec_path = tmp.path().join("alpha.json");
    write_spec(&spec_path, &scene_spec("alpha", 11));

    run_ok(&["synth", "--config", spec_path.to_str().unwrap(), "--out", out_str]);
    run_ok(&["patchify", "--out", out_str, "--label", "base", "--scene", "alpha"]);
    let stdout = run_ok(&[
        "train", "--out", out_str, "--manifest", "base",
        "--method", "MTCNN", "--task", "b", "--preset", "mini",
        "--seed", "5", "--epochs", "2", "--quiet",
    ]);
    assert!(stdout.starts_with("trained MTCNN: 2 epochs, 2 steps"), "{stdout}");

    let ckpt = tmp.path().join("checkpoints/MTCNN/epoch-0002.ckp1");
    assert!(ckpt.is_file(), "final checkpoint missing");
    let stdout = run_ok(&[
        "infer", "--out", out_str,
        "--checkpoint", ckpt.to_str().unwrap(),
        "--scene", "alpha", "--label", "MTCNN",
    ]);
    assert!(stdout.starts_with("mosaic MTCNN: 1 tiles of scene alpha"), "{stdout}");

    let stdout = run_ok(&["evaluate", "--out", out_str, "--label", "MTCNN", "--scene", "alpha"]);
    assert!(stdout.contains("MTCNN on alpha: PSNR"), "{stdout}");
    assert!(stdout.contains("O1 baseline: PSNR"), "{stdout}");

    let table = run_ok(&["report", "--out", out_str]);
    assert!(table.contains("MTCNN"), "{table}");
    assert!(table.contains("O1 baseline"), "{table}");
    assert!(table.contains("PSNR (dB)"), "{table}");

    // Explicit file arguments select the same report.
    let report_file = tmp.path().join("reports/MTCNN.json");
    let explicit = run_ok(&["report", "--out", out_str, report_file.to_str().unwrap()]);
    assert_eq!(table, explicit);

    // A task flag contradicting the method is a validation error.
    let out = run_err(&[
        "train", "--out", out_str, "--manifest", "base",
        "--method", "MTCNN", "--task", "a", "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluating_the_o1_image_reproduces_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = OutDir::new(tmp.path());
    out.ensure().unwrap();
    let quartet = generate_scene(&scene_spec("alpha", 11)).unwrap();
    mtfuse::experiment::save_scene(&out, &quartet).unwrap();

    // A mosaic that simply repeats O1 must score exactly like the baseline.
    let h = quartet.o1.height();
    let w = quartet.o1.width();
    let mut coverage = Raster::zeros(h, w, vec!["coverage".into()], ValueDomain::Raw);
    coverage.data_mut().fill(1.0);
    save_raster(&quartet.o1, &out.mosaics().join("copy.ras1")).unwrap();
    save_raster(&coverage, &out.mosaics().join("copy.coverage.ras1")).unwrap();

    run_ok(&[
        "evaluate", "--out", tmp.path().to_str().unwrap(),
        "--label", "copy", "--scene", "alpha", "--method", "O1copy",
    ]);
    let record = EvalRecord::load(&out.reports().join("copy.json")).unwrap();
    assert_eq!(record.report.method, "O1copy");
    assert!(!record.report.baseline);
    assert_eq!(record.baseline.method, "O1 baseline");
    assert!(record.baseline.baseline);
    assert_eq!(record.report.psnr_db, record.baseline.psnr_db);
    assert_eq!(record.report.psnr_mean, record.baseline.psnr_mean);
    assert_eq!(record.report.ssim, record.baseline.ssim);
    assert_eq!(record.report.msa_radians, record.baseline.msa_radians);
    assert_eq!(record.report.pixels, record.baseline.pixels);
}

#[test]
fn exit_codes_separate_validation_from_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out_str = tmp.path().to_str().unwrap();

    // Unknown method name: usage error from the parser.
    let out = run_err(&["train", "--out", out_str, "--manifest", "m", "--method", "GAN"]);
    assert_eq!(out.status.code(), Some(2));

    // Path-escaping label: validation.
    let out = run_err(&["evaluate", "--out", out_str, "--label", "../x", "--scene", "s"]);
    assert_eq!(out.status.code(), Some(2));

    // Missing artifacts: data error.
    let out = run_err(&["evaluate", "--out", out_str, "--label", "x", "--scene", "s"]);
    assert_eq!(out.status.code(), Some(3));

    // Spec whose test scene lacks test tiles: validation.
    let spec = serde_json::json!({
        "label": "bad",
        "scenes": [{
            "name": "alpha", "seed": 1, "height": 256, "width": 256,
            "n_segments": 4, "change_fraction": 0.3, "speckle_looks": 4.0,
            "split": "all_train"
        }],
        "train_scenes": ["alpha"],
        "test_scene": "alpha",
        "methods": ["MTCNN"],
        "seed": 1
    });
    let spec_path = tmp.path().join("bad.json");
    std::fs::write(&spec_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    let out = run_err(&[
        "experiment", "--config", spec_path.to_str().unwrap(), "--out", out_str,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no test tiles"), "{stderr}");
}
