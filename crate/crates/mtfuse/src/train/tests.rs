use super::*;
use crate::net::{DiscriminatorArch, GeneratorArch};
use crate::pipeline::normalize_quartet;
use crate::synth::{generate_scene, RegionSplit, SceneSpec};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn mini_config(task: Task, method: Method, seed: u64) -> TrainConfig {
    let n = task.input_channels();
    TrainConfig {
        generator: GeneratorArch::mini(n),
        discriminator: DiscriminatorArch::mini(n + 4),
        ..TrainConfig::standard(task, method, seed)
    }
}

fn random_array(shape: (usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

fn random_pair(n: usize, size: usize, seed: u64) -> PatchPair {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    PatchPair {
        input: Array3::from_shape_fn((n, size, size), |_| rng.gen_range(-1.0f32..1.0)),
        target: Array3::from_shape_fn((4, size, size), |_| rng.gen_range(-1.0f32..1.0)),
        scene: "pair".to_string(),
        row: 0,
        col: 0,
    }
}

// ---- loss values ----

#[test]
fn zero_scores_give_the_textbook_loss_values() {
    let z = Array3::<f64>::zeros((1, 3, 3));
    let ln2 = std::f64::consts::LN_2;
    assert!((d_loss(&z, &z).unwrap() - 2.0 * ln2).abs() < 1e-15);
    assert!((g_gan_loss(&z) - ln2).abs() < 1e-15);
}

#[test]
fn confident_correct_discriminator_drives_d_loss_to_zero() {
    let real = Array3::<f64>::from_elem((1, 2, 2), 20.0);
    let fake = Array3::<f64>::from_elem((1, 2, 2), -20.0);
    assert!(d_loss(&real, &fake).unwrap() < 1e-8);
    // the same scores punish the generator hard
    assert!(g_gan_loss(&fake) > 19.0);
    // and a fooled discriminator pays heavily
    assert!(d_loss(&fake, &real).unwrap() > 39.0);
}

#[test]
fn adversarial_losses_match_a_directly_coded_sigmoid_oracle() {
    let real = random_array((2, 3, 5), -5.0, 5.0, 11);
    let fake = random_array((2, 3, 5), -5.0, 5.0, 12);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let n = real.len() as f64;
    let d_oracle = real.iter().map(|&s| -(sig(s)).ln()).sum::<f64>() / n
        + fake.iter().map(|&s| -(1.0 - sig(s)).ln()).sum::<f64>() / n;
    let g_oracle = fake.iter().map(|&s| -(sig(s)).ln()).sum::<f64>() / n;
    assert!((d_loss(&real, &fake).unwrap() - d_oracle).abs() < 1e-12);
    assert!((g_gan_loss(&fake) - g_oracle).abs() < 1e-12);
}

#[test]
fn softplus_losses_survive_extreme_scores() {
    let huge = Array3::<f64>::from_elem((1, 1, 1), 800.0);
    let tiny = Array3::<f64>::from_elem((1, 1, 1), -800.0);
    // -ln σ(±800) overflows if computed naively
    assert!((d_loss(&huge, &tiny).unwrap()).abs() < 1e-12);
    assert!((g_gan_loss(&tiny) - 800.0).abs() < 1e-9);
}

#[test]
fn reconstruction_losses_match_hand_computed_examples() {
    let a = Array3::from_shape_vec((1, 2, 2), vec![1.0f64, -2.0, 0.5, 3.0]).unwrap();
    let b = Array3::from_shape_vec((1, 2, 2), vec![0.0f64, 1.0, 0.5, -1.0]).unwrap();
    // |1| + |-3| + 0 + |4| over 4 elements
    assert!((l1_loss(&a, &b).unwrap() - 2.0).abs() < 1e-15);
    // 1 + 9 + 0 + 16 over 4 elements
    assert!((l2_loss(&a, &b).unwrap() - 6.5).abs() < 1e-15);
}

#[test]
fn losses_reject_mismatched_shapes() {
    let a = Array3::<f64>::zeros((1, 2, 2));
    let b = Array3::<f64>::zeros((1, 2, 3));
    assert!(d_loss(&a, &b).is_err());
    assert!(l1_loss(&a, &b).is_err());
    assert!(l2_loss(&a, &b).is_err());
}

// ---- loss gradients ----

fn finite_diff(f: impl Fn(&Array3<f64>) -> f64, x: &Array3<f64>, h: f64) -> Array3<f64> {
    let mut g = Array3::zeros(x.dim());
    for (i, gi) in g.iter_mut().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        minus.as_slice_mut().unwrap()[i] -= h;
        *gi = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn assert_close(a: &Array3<f64>, b: &Array3<f64>, tol: f64) {
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let real = random_array((1, 3, 4), -3.0, 3.0, 21);
    let fake = random_array((1, 3, 4), -3.0, 3.0, 22);
    let h = 1e-6;
    let (g_real, g_fake) = d_loss_backward(&real, &fake).unwrap();
    let fd_real = finite_diff(|r| d_loss(r, &fake).unwrap(), &real, h);
    let fd_fake = finite_diff(|f| d_loss(&real, f).unwrap(), &fake, h);
    assert_close(&g_real, &fd_real, 1e-8);
    assert_close(&g_fake, &fd_fake, 1e-8);
    let g_gan = g_gan_backward(&fake);
    let fd_gan = finite_diff(|f| g_gan_loss(f), &fake, h);
    assert_close(&g_gan, &fd_gan, 1e-8);
}

#[test]
fn g_gan_gradient_is_negative_everywhere() {
    // larger fake scores always help the generator
    let fake = random_array((1, 4, 4), -6.0, 6.0, 23);
    for &g in g_gan_backward(&fake).iter() {
        assert!(g < 0.0);
    }
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    // keep |a - b| away from the L1 kink so the FD probe stays one-sided
    let a = random_array((2, 3, 3), 1.0, 2.0, 31);
    let b = random_array((2, 3, 3), -2.0, -1.0, 32);
    let h = 1e-6;
    assert_close(
        &l1_backward(&a, &b),
        &finite_diff(|x| l1_loss(x, &b).unwrap(), &a, h),
        1e-9,
    );
    assert_close(
        &l2_backward(&a, &b),
        &finite_diff(|x| l2_loss(x, &b).unwrap(), &a, h),
        1e-8,
    );
}

#[test]
fn l1_gradient_is_zero_at_exact_ties() {
    let a = Array3::<f64>::from_elem((1, 2, 2), 0.25);
    let g = l1_backward(&a, &a);
    assert!(g.iter().all(|&v| v == 0.0));
}

// ---- config validation ----

#[test]
fn config_validation_catches_inconsistencies() {
    let good = mini_config(Task::B, Method::Cgan, 1);
    assert!(good.validate().is_ok());

    let mut c = good.clone();
    c.batch_size = 2;
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.dropout = 0.3; // generator arch still says 0.5
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.generator = GeneratorArch::mini(2); // Task B feeds 8 channels
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.discriminator = DiscriminatorArch::mini(6);
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.lambda_l1 = -1.0;
    assert!(c.validate().is_err());

    let mut c = good;
    c.epochs = 0;
    assert!(c.validate().is_err());
}

#[test]
fn cnn_state_carries_no_discriminator() {
    let state = ModelState::new(mini_config(Task::A, Method::Cnn, 3)).unwrap();
    assert!(state.disc.is_none());
    assert!(state.opt_d.is_none());
    let state = ModelState::new(mini_config(Task::A, Method::Cgan, 3)).unwrap();
    assert!(state.disc.is_some());
}

// ---- train_step ----

#[test]
fn cgan_step_reports_consistent_losses() {
    let mut state = ModelState::new(mini_config(Task::B, Method::Cgan, 7)).unwrap();
    let pair = random_pair(8, 16, 70);
    let losses = train_step(&mut state, &pair).unwrap();
    let d = losses.d.expect("cGAN reports d_loss");
    let g_gan = losses.g_gan.expect("cGAN reports g_gan");
    assert!(d.is_finite() && g_gan.is_finite() && losses.recon.is_finite());
    assert!((losses.g_total - (g_gan + 100.0 * losses.recon)).abs() < 1e-12);
    assert_eq!(state.global_step, 1);
}

#[test]
fn cnn_step_reports_reconstruction_only() {
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 7)).unwrap();
    let pair = random_pair(2, 16, 71);
    let losses = train_step(&mut state, &pair).unwrap();
    assert!(losses.d.is_none() && losses.g_gan.is_none());
    assert_eq!(losses.g_total, losses.recon);
}

#[test]
fn train_step_rejects_malformed_pairs() {
    let mut state = ModelState::new(mini_config(Task::B, Method::Cgan, 7)).unwrap();
    let wrong_channels = random_pair(2, 16, 72);
    assert!(train_step(&mut state, &wrong_channels).is_err());
    let mut bad_target = random_pair(8, 16, 73);
    bad_target.target = Array3::zeros((3, 16, 16));
    assert!(train_step(&mut state, &bad_target).is_err());
    let mut bad_size = random_pair(8, 16, 74);
    bad_size.target = Array3::zeros((4, 8, 8));
    assert!(train_step(&mut state, &bad_size).is_err());
    assert_eq!(state.global_step, 0);
}

fn collect_params(state: &mut ModelState) -> Vec<f32> {
    let mut all = Vec::new();
    state.gen.visit_params(&mut |p| all.extend_from_slice(p.value));
    if let Some(disc) = state.disc.as_mut() {
        disc.visit_params(&mut |p| all.extend_from_slice(p.value));
    }
    all
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let pair = random_pair(8, 16, 80);
    let run = |_: u32| {
        let mut state = ModelState::new(mini_config(Task::B, Method::Cgan, 9)).unwrap();
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(train_step(&mut state, &pair).unwrap());
        }
        (losses, collect_params(&mut state))
    };
    let (la, pa) = run(0);
    let (lb, pb) = run(1);
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn dropout_stream_differs_between_steps() {
    // the per-step salt must not freeze the mask across steps
    let a = derive_rng(9, "dropout", 0).gen::<u64>();
    let b = derive_rng(9, "dropout", 1).gen::<u64>();
    assert_ne!(a, b);
}

#[test]
fn cnn_training_reduces_the_reconstruction_loss() {
    let mut cfg = mini_config(Task::A, Method::Cnn, 5);
    cfg.learning_rate = 1e-3;
    let mut state = ModelState::new(cfg).unwrap();
    let pair = random_pair(2, 16, 90);
    let first = train_step(&mut state, &pair).unwrap().recon;
    let mut last = first;
    for _ in 0..149 {
        last = train_step(&mut state, &pair).unwrap().recon;
    }
    assert!(
        last < 0.6 * first,
        "L1 did not drop: first {first}, last {last}"
    );
}

#[test]
fn cgan_training_reduces_the_generator_objective() {
    let mut cfg = mini_config(Task::B, Method::Cgan, 5);
    cfg.learning_rate = 1e-3;
    let mut state = ModelState::new(cfg).unwrap();
    let pair = random_pair(8, 16, 91);
    let first = train_step(&mut state, &pair).unwrap();
    let mut last = first;
    for _ in 0..149 {
        last = train_step(&mut state, &pair).unwrap();
    }
    assert!(
        last.recon < 0.6 * first.recon,
        "recon did not drop: first {:?}, last {:?}",
        first.recon,
        last.recon
    );
    assert!(last.d.unwrap() > 1e-4, "discriminator collapsed to zero loss");
}

#[test]
fn l2_distance_trains_too() {
    let mut cfg = mini_config(Task::A, Method::Cnn, 6);
    cfg.cnn_distance = Distance::L2;
    cfg.learning_rate = 1e-3;
    let mut state = ModelState::new(cfg).unwrap();
    let pair = random_pair(2, 16, 92);
    let first = train_step(&mut state, &pair).unwrap().recon;
    let mut last = first;
    for _ in 0..99 {
        last = train_step(&mut state, &pair).unwrap().recon;
    }
    assert!(last < 0.6 * first);
}

// ---- fit ----

#[test]
fn fit_runs_every_pair_once_per_epoch() {
    let mut cfg = mini_config(Task::A, Method::Cnn, 13);
    cfg.epochs = 2;
    let mut state = ModelState::new(cfg).unwrap();
    let pairs: Vec<PatchPair> = (0..3).map(|i| random_pair(2, 8, 100 + i)).collect();
    let curve = fit(&mut state, &pairs, &FitOptions::default()).unwrap();
    assert_eq!(curve.len(), 6);
    assert_eq!(state.global_step, 6);
    assert_eq!(state.epoch, 2);
    let steps: Vec<u64> = curve.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
    let epochs: Vec<usize> = curve.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 1, 1, 2, 2, 2]);
}

#[test]
fn fit_rejects_an_empty_training_set() {
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 13)).unwrap();
    let err = fit(&mut state, &[], &FitOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn fit_loss_curve_is_deterministic() {
    let pairs: Vec<PatchPair> = (0..2).map(|i| random_pair(8, 8, 110 + i)).collect();
    let run = |_: u32| {
        let mut cfg = mini_config(Task::B, Method::Cgan, 17);
        cfg.epochs = 3;
        let mut state = ModelState::new(cfg).unwrap();
        fit(&mut state, &pairs, &FitOptions::default()).unwrap()
    };
    assert_eq!(run(0), run(1));
}

#[test]
fn fit_persists_curve_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(Task::A, Method::Cnn, 19);
    cfg.epochs = 2;
    cfg.checkpoint_every = 2;
    let mut state = ModelState::new(cfg).unwrap();
    let pairs = vec![random_pair(2, 8, 120)];
    let curve_path = dir.path().join("curve.csv");
    let opts = FitOptions {
        checkpoint_dir: Some(dir.path()),
        curve_path: Some(&curve_path),
        verbose: false,
    };
    fit(&mut state, &pairs, &opts).unwrap();
    assert!(!dir.path().join("epoch-0001.ckp1").exists());
    assert!(dir.path().join("epoch-0002.ckp1").exists());
    let csv = std::fs::read_to_string(&curve_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,epoch,d_loss,g_gan,l1");
    assert_eq!(lines.len(), 3);
    // CNN rows leave the adversarial columns empty
    assert!(lines[1].starts_with("1,1,,,"));
}

// ---- checkpointing ----

fn tiny_norm_bundle() -> NormBundle {
    let spec = SceneSpec {
        name: "norm".to_string(),
        seed: 5,
        height: 256,
        width: 256,
        n_segments: 4,
        change_fraction: 0.3,
        speckle_looks: 4.0,
        palette: Default::default(),
        split: RegionSplit::AllTrain,
        texture_amp: 0.02,
    };
    let q = generate_scene(&spec).unwrap();
    NormBundle::from_scenes(&[&q], (1.0, 99.0)).unwrap()
}

fn state_fingerprint(state: &mut ModelState) -> Vec<f32> {
    let mut all = collect_params(state);
    state.gen.visit_buffers(&mut |b| all.extend_from_slice(b.value));
    if let Some(disc) = state.disc.as_mut() {
        disc.visit_buffers(&mut |b| all.extend_from_slice(b.value));
    }
    let (m, v) = state.opt_g.moments();
    all.extend(m.iter().flatten());
    all.extend(v.iter().flatten());
    if let Some(opt_d) = state.opt_d.as_ref() {
        let (m, v) = opt_d.moments();
        all.extend(m.iter().flatten());
        all.extend(v.iter().flatten());
    }
    all
}

#[test]
fn checkpoint_roundtrip_is_bitwise_exact() {
    let mut state = ModelState::new(mini_config(Task::B, Method::Cgan, 23)).unwrap();
    state.norm = Some(tiny_norm_bundle());
    let pair = random_pair(8, 16, 130);
    for _ in 0..3 {
        train_step(&mut state, &pair).unwrap();
    }
    state.epoch = 1;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckp1");
    checkpoint::save_checkpoint(&path, &mut state).unwrap();
    let mut loaded = checkpoint::load_checkpoint(&path).unwrap();

    assert_eq!(loaded.config, state.config);
    assert_eq!(loaded.epoch, 1);
    assert_eq!(loaded.global_step, 3);
    assert_eq!(loaded.opt_g.t, state.opt_g.t);
    assert_eq!(loaded.norm, state.norm);
    let a = state_fingerprint(&mut state);
    let b = state_fingerprint(&mut loaded);
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    // saving the loaded state reproduces the file byte for byte
    let path2 = dir.path().join("again.ckp1");
    checkpoint::save_checkpoint(&path2, &mut loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn fresh_state_checkpoints_without_optimizer_moments() {
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 29)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fresh.ckp1");
    checkpoint::save_checkpoint(&path, &mut state).unwrap();
    let mut loaded = checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.opt_g.t, 0);
    assert_eq!(collect_params(&mut state), collect_params(&mut loaded));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let pairs: Vec<PatchPair> = (0..2).map(|i| random_pair(8, 8, 140 + i)).collect();

    let mut cfg = mini_config(Task::B, Method::Cgan, 31);
    cfg.epochs = 4;
    let mut straight = ModelState::new(cfg.clone()).unwrap();
    let full_curve = fit(&mut straight, &pairs, &FitOptions::default()).unwrap();

    let mut cfg_half = cfg.clone();
    cfg_half.epochs = 2;
    let mut first_half = ModelState::new(cfg_half).unwrap();
    let head = fit(&mut first_half, &pairs, &FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckp1");
    checkpoint::save_checkpoint(&path, &mut first_half).unwrap();
    let mut resumed = checkpoint::load_checkpoint(&path).unwrap();
    resumed.config.epochs = 4;
    let tail = fit(&mut resumed, &pairs, &FitOptions::default()).unwrap();

    let stitched: Vec<CurveRow> = head.into_iter().chain(tail).collect();
    assert_eq!(stitched, full_curve);
    let a = state_fingerprint(&mut straight);
    let b = state_fingerprint(&mut resumed);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bogus.ckp1");
    std::fs::write(&path, b"RAS1this is not a checkpoint").unwrap();
    let err = checkpoint::load_checkpoint(&path)
        .err()
        .expect("foreign file must be rejected");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_rejects_a_doctored_entry_table() {
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 37)).unwrap();
    let pair = random_pair(2, 8, 150);
    train_step(&mut state, &pair).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckp1");
    checkpoint::save_checkpoint(&path, &mut state).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
    let entries = header["entries"].as_array_mut().unwrap();
    entries[0]["name"] = serde_json::Value::String("gen.head.0.conv.weights".to_string());
    let doctored = serde_json::to_vec(&header).unwrap();
    let mut out = Vec::new();
    out.extend_from_slice(b"CKP1");
    out.extend_from_slice(&(doctored.len() as u32).to_le_bytes());
    out.extend_from_slice(&doctored);
    out.extend_from_slice(&bytes[8 + header_len..]);
    let path2 = dir.path().join("doctored.ckp1");
    std::fs::write(&path2, out).unwrap();

    let err = checkpoint::load_checkpoint(&path2)
        .err()
        .expect("doctored entry table must be rejected");
    let msg = err.to_string();
    assert!(msg.contains("missing"), "unexpected error: {msg}");
}

// ---- float64 gradient checks through the full networks ----

struct GradProbe {
    slot: usize,
    idx: usize,
}

fn sample_probes(slot_lens: &[usize], count: usize, seed: u64) -> Vec<GradProbe> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let slot = rng.gen_range(0..slot_lens.len());
            let idx = rng.gen_range(0..slot_lens[slot]);
            GradProbe { slot, idx }
        })
        .collect()
}

fn gen_slot_lens(gen: &mut Generator<f64>) -> Vec<usize> {
    let mut lens = Vec::new();
    gen.visit_params(&mut |p| lens.push(p.value.len()));
    lens
}

fn disc_slot_lens(disc: &mut Discriminator<f64>) -> Vec<usize> {
    let mut lens = Vec::new();
    disc.visit_params(&mut |p| lens.push(p.value.len()));
    lens
}

fn poke_gen(gen: &mut Generator<f64>, probe: &GradProbe, delta: f64) {
    let mut at = 0;
    gen.visit_params(&mut |p| {
        if at == probe.slot {
            p.value[probe.idx] += delta;
        }
        at += 1;
    });
}

fn read_gen_grad(gen: &mut Generator<f64>, probe: &GradProbe) -> f64 {
    let mut at = 0;
    let mut out = f64::NAN;
    gen.visit_params(&mut |p| {
        if at == probe.slot {
            out = p.grad[probe.idx];
        }
        at += 1;
    });
    out
}

fn poke_disc(disc: &mut Discriminator<f64>, probe: &GradProbe, delta: f64) {
    let mut at = 0;
    disc.visit_params(&mut |p| {
        if at == probe.slot {
            p.value[probe.idx] += delta;
        }
        at += 1;
    });
}

fn read_disc_grad(disc: &mut Discriminator<f64>, probe: &GradProbe) -> f64 {
    let mut at = 0;
    let mut out = f64::NAN;
    disc.visit_params(&mut |p| {
        if at == probe.slot {
            out = p.grad[probe.idx];
        }
        at += 1;
    });
    out
}

// A conv bias feeding batch norm has exactly zero gradient (the
// normalization cancels constant channel shifts), so both sides sit at
// roundoff noise there; below the noise floor the probe counts as a match.
fn rel_err(a: f64, f: f64) -> f64 {
    let m = f64::max(a.abs(), f.abs());
    if m < 1e-6 {
        0.0
    } else {
        (a - f).abs() / m
    }
}

/// Full generator objective with the discriminator frozen; the dropout
/// stream is replayed identically on every evaluation.
fn g_objective(
    gen: &mut Generator<f64>,
    disc: &mut Discriminator<f64>,
    x: &Array3<f64>,
    y: &Array3<f64>,
    lambda: f64,
) -> f64 {
    let mut rng = derive_rng(99, "dropout", 0);
    let fake = gen.forward(x, Mode::Train, &mut rng).unwrap();
    let pair = concat(&[x, &fake]);
    let s = disc.forward(&pair, Mode::Train).unwrap();
    g_gan_loss(&s) + lambda * l1_loss(&fake, y).unwrap()
}

#[test]
fn generator_gradients_match_float64_finite_differences() {
    let n = 8;
    let mut gen = Generator::<f64>::new(&GeneratorArch::mini(n), 41).unwrap();
    let mut disc = Discriminator::<f64>::new(&DiscriminatorArch::mini(n + 4), 41).unwrap();
    let x = random_array((n, 8, 8), -1.0, 1.0, 160);
    let y = random_array((4, 8, 8), -1.0, 1.0, 161);
    let lambda = 100.0;

    gen.zero_grad();
    let mut rng = derive_rng(99, "dropout", 0);
    let fake = gen.forward(&x, Mode::Train, &mut rng).unwrap();
    let pair = concat(&[&x, &fake]);
    let s = disc.forward(&pair, Mode::Train).unwrap();
    let gpair = disc.backward(&g_gan_backward(&s), true);
    let gan_part = gpair.slice(ndarray::s![n..n + 4, .., ..]).to_owned();
    let mut gfake = l1_backward(&fake, &y);
    gfake.zip_mut_with(&gan_part, |l, &g| *l = lambda * *l + g);
    gen.backward(&gfake);

    let lens = gen_slot_lens(&mut gen);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for probe in sample_probes(&lens, 25, 404) {
        let analytic = read_gen_grad(&mut gen, &probe);
        poke_gen(&mut gen, &probe, h);
        let up = g_objective(&mut gen, &mut disc, &x, &y, lambda);
        poke_gen(&mut gen, &probe, -2.0 * h);
        let down = g_objective(&mut gen, &mut disc, &x, &y, lambda);
        poke_gen(&mut gen, &probe, h);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic, fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn discriminator_gradients_match_float64_finite_differences() {
    let n = 8;
    let mut gen = Generator::<f64>::new(&GeneratorArch::mini(n), 43).unwrap();
    let mut disc = Discriminator::<f64>::new(&DiscriminatorArch::mini(n + 4), 43).unwrap();
    let x = random_array((n, 8, 8), -1.0, 1.0, 170);
    let y = random_array((4, 8, 8), -1.0, 1.0, 171);
    let mut rng = derive_rng(99, "dropout", 0);
    let fake = gen.forward(&x, Mode::Train, &mut rng).unwrap();
    let real_pair = concat(&[&x, &y]);
    let fake_pair = concat(&[&x, &fake]);

    disc.zero_grad();
    let s_real = disc.forward(&real_pair, Mode::Train).unwrap();
    disc.backward(&d_loss_backward_real(&s_real), false);
    let s_fake = disc.forward(&fake_pair, Mode::Train).unwrap();
    disc.backward(&d_loss_backward_fake(&s_fake), false);

    let objective = |disc: &mut Discriminator<f64>| {
        let sr = disc.forward(&real_pair, Mode::Train).unwrap();
        let sf = disc.forward(&fake_pair, Mode::Train).unwrap();
        d_loss(&sr, &sf).unwrap()
    };
    let lens = disc_slot_lens(&mut disc);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for probe in sample_probes(&lens, 25, 405) {
        let analytic = read_disc_grad(&mut disc, &probe);
        poke_disc(&mut disc, &probe, h);
        let up = objective(&mut disc);
        poke_disc(&mut disc, &probe, -2.0 * h);
        let down = objective(&mut disc);
        poke_disc(&mut disc, &probe, h);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic, fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

// ---- scene inference ----

fn split_scene_spec() -> SceneSpec {
    SceneSpec {
        name: "halves".to_string(),
        seed: 77,
        height: 256,
        width: 512,
        n_segments: 10,
        change_fraction: 0.3,
        speckle_looks: 4.0,
        palette: Default::default(),
        split: RegionSplit::VerticalFraction { train_frac: 0.5 },
        texture_amp: 0.02,
    }
}

#[test]
fn infer_scene_mosaics_test_tiles_at_their_origins() {
    let quartet = generate_scene(&split_scene_spec()).unwrap();
    let bundle = NormBundle::from_scenes(&[&quartet], (1.0, 99.0)).unwrap();
    let normalized = normalize_quartet(&quartet, &bundle).unwrap();

    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 47)).unwrap();
    state.norm = Some(bundle.clone());
    let mosaic = infer_scene(&mut state, &normalized, Split::Test).unwrap();
    assert_eq!(mosaic.tiles, 1);
    assert_eq!(mosaic.image.value_domain(), ValueDomain::Reflectance01);
    assert_eq!(mosaic.image.height(), 256);
    assert_eq!(mosaic.image.width(), 512);

    // the right half is covered, the left half untouched
    for (x, want) in [(0, 0.0f32), (255, 0.0), (256, 1.0), (511, 1.0)] {
        assert_eq!(mosaic.coverage.get(0, x, 0), want, "column {x}");
        assert_eq!(mosaic.coverage.get(255, x, 0), want);
    }
    for c in 0..4 {
        assert_eq!(mosaic.image.get(10, 10, c), 0.0, "uncovered pixels stay 0");
    }

    // mosaic pixels equal a hand-run forward of the same tile
    let pair = assemble_input(&normalized, Task::A, 0, 256, PATCH).unwrap();
    let mut rng = derive_rng(47, "infer", 0);
    let out = state.gen.forward(&pair.input, Mode::Eval, &mut rng).unwrap();
    let mut tile = Raster::zeros(PATCH, PATCH, optical_bands(), ValueDomain::NormalizedPm1);
    for y in 0..PATCH {
        for x in 0..PATCH {
            for c in 0..4 {
                tile.set(y, x, c, out[[c, y, x]]);
            }
        }
    }
    let tile = denormalize(&tile, &bundle.optical).unwrap();
    for (y, x) in [(0, 0), (7, 200), (255, 255)] {
        for c in 0..4 {
            assert_eq!(mosaic.image.get(y, 256 + x, c), tile.get(y, x, c));
        }
    }

    // a second run is bitwise identical
    let again = infer_scene(&mut state, &normalized, Split::Test).unwrap();
    assert_eq!(again.image.data(), mosaic.image.data());
}

#[test]
fn infer_scene_requires_normalization_stats() {
    let quartet = generate_scene(&split_scene_spec()).unwrap();
    let bundle = NormBundle::from_scenes(&[&quartet], (1.0, 99.0)).unwrap();
    let normalized = normalize_quartet(&quartet, &bundle).unwrap();
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 47)).unwrap();
    let err = infer_scene(&mut state, &normalized, Split::Test)
        .err()
        .expect("missing stats must be rejected");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn infer_scene_errors_when_the_split_has_no_tiles() {
    let mut spec = split_scene_spec();
    spec.split = RegionSplit::AllTrain;
    let quartet = generate_scene(&spec).unwrap();
    let bundle = NormBundle::from_scenes(&[&quartet], (1.0, 99.0)).unwrap();
    let normalized = normalize_quartet(&quartet, &bundle).unwrap();
    let mut state = ModelState::new(mini_config(Task::A, Method::Cnn, 47)).unwrap();
    state.norm = Some(bundle);
    let err = infer_scene(&mut state, &normalized, Split::Test)
        .err()
        .expect("empty split must be rejected");
    assert_eq!(err.exit_code(), 3);
}
