//! Losses, the alternating optimization recipe, and scene inference.
//!
//! The adversarial objective uses logits with the sigmoid folded into
//! softplus forms: the discriminator minimizes
//! mean softplus(-s_real) + mean softplus(s_fake), the generator minimizes
//! the non-saturating mean softplus(-s_fake) plus λ times the L1
//! reconstruction distance. The CNN ablation trains the same generator on
//! the reconstruction distance alone.

pub mod adam;
pub mod checkpoint;

use crate::error::{data_err, validation, Result};
use crate::gemm::Scalar;
use crate::net::{Discriminator, Generator, Mode};
use crate::pipeline::{
    assemble_input, denormalize, extract_patches, NormBundle, PatchPair, Split, Task, PATCH,
};
use crate::raster::{optical_bands, Raster, SceneQuartet, ValueDomain};
use crate::seed::derive_rng;
use adam::{Adam, AdamConfig};
use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Generator trained on the reconstruction distance alone.
    Cnn,
    /// Alternating discriminator/generator adversarial training.
    Cgan,
}

/// Reconstruction distance for the CNN ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    L2,
}

impl Distance {
    pub fn loss<T: Scalar>(self, fake: &Array3<T>, real: &Array3<T>) -> Result<f64> {
        match self {
            Distance::L1 => l1_loss(fake, real),
            Distance::L2 => l2_loss(fake, real),
        }
    }

    pub fn backward<T: Scalar>(self, fake: &Array3<T>, real: &Array3<T>) -> Array3<T> {
        match self {
            Distance::L1 => l1_backward(fake, real),
            Distance::L2 => l2_backward(fake, real),
        }
    }
}

/// Full training recipe; serialized with every field explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub method: Method,
    pub lambda_l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout: f64,
    pub seed: u64,
    pub cnn_distance: Distance,
    pub checkpoint_every: usize,
    pub include_t1_pairs: bool,
    pub generator: crate::net::GeneratorArch,
    pub discriminator: crate::net::DiscriminatorArch,
}

impl TrainConfig {
    /// Full-scale recipe: 200 epochs, batch 1, lr 2e-4, β=(0.5, 0.999),
    /// dropout 0.5, λ=100.
    pub fn standard(task: Task, method: Method, seed: u64) -> TrainConfig {
        let n = task.input_channels();
        TrainConfig {
            task,
            method,
            lambda_l1: 100.0,
            epochs: 200,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            dropout: 0.5,
            seed,
            cnn_distance: Distance::L1,
            checkpoint_every: 50,
            include_t1_pairs: false,
            generator: crate::net::GeneratorArch::standard(n),
            discriminator: crate::net::DiscriminatorArch::standard(n + 4),
        }
    }

    /// Same recipe at the desk-scale network widths.
    pub fn small(task: Task, method: Method, seed: u64) -> TrainConfig {
        let n = task.input_channels();
        TrainConfig {
            generator: crate::net::GeneratorArch::small(n),
            discriminator: crate::net::DiscriminatorArch::small(n + 4),
            ..TrainConfig::standard(task, method, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_l1 < 0.0 {
            return Err(validation("lambda_l1 must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(validation("learning_rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(validation("epochs must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(validation("only batch size 1 is supported"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(validation("adam betas must be in [0, 1)"));
        }
        if self.checkpoint_every < 1 {
            return Err(validation("checkpoint_every must be at least 1"));
        }
        self.generator.validate()?;
        if self.generator.in_channels != self.task.input_channels() {
            return Err(validation(format!(
                "generator takes {} channels but the task provides {}",
                self.generator.in_channels,
                self.task.input_channels()
            )));
        }
        if self.generator.out_channels != 4 {
            return Err(validation("generator must emit 4 optical channels"));
        }
        if self.generator.dropout != self.dropout {
            return Err(validation(
                "config dropout and generator architecture dropout disagree",
            ));
        }
        if self.method == Method::Cgan {
            self.discriminator.validate()?;
            let want = self.task.input_channels() + 4;
            if self.discriminator.in_channels != want {
                return Err(validation(format!(
                    "discriminator takes {} channels but input+optical pairs have {}",
                    self.discriminator.in_channels, want
                )));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_same_shape<T: Scalar>(what: &str, a: &Array3<T>, b: &Array3<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(validation(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Discriminator objective: mean -log σ(s_real) + mean -log(1 - σ(s_fake)).
pub fn d_loss<T: Scalar>(score_real: &Array3<T>, score_fake: &Array3<T>) -> Result<f64> {
    check_same_shape("d_loss", score_real, score_fake)?;
    Ok(mean_softplus_neg(score_real) + mean_softplus(score_fake))
}

fn mean_softplus<T: Scalar>(s: &Array3<T>) -> f64 {
    let n = s.len() as f64;
    s.iter().map(|&v| softplus(v.to_f64())).sum::<f64>() / n
}

fn mean_softplus_neg<T: Scalar>(s: &Array3<T>) -> f64 {
    let n = s.len() as f64;
    s.iter().map(|&v| softplus(-v.to_f64())).sum::<f64>() / n
}

/// ∂d_loss/∂s_real = -σ(-s_real)/N.
pub fn d_loss_backward_real<T: Scalar>(score_real: &Array3<T>) -> Array3<T> {
    let n = score_real.len() as f64;
    score_real.mapv(|v| T::from_f64(-sigmoid(-v.to_f64()) / n))
}

/// ∂d_loss/∂s_fake = σ(s_fake)/N.
pub fn d_loss_backward_fake<T: Scalar>(score_fake: &Array3<T>) -> Array3<T> {
    let n = score_fake.len() as f64;
    score_fake.mapv(|v| T::from_f64(sigmoid(v.to_f64()) / n))
}

pub fn d_loss_backward<T: Scalar>(
    score_real: &Array3<T>,
    score_fake: &Array3<T>,
) -> Result<(Array3<T>, Array3<T>)> {
    check_same_shape("d_loss", score_real, score_fake)?;
    Ok((
        d_loss_backward_real(score_real),
        d_loss_backward_fake(score_fake),
    ))
}

/// Non-saturating generator objective: mean -log σ(s_fake).
pub fn g_gan_loss<T: Scalar>(score_fake: &Array3<T>) -> f64 {
    mean_softplus_neg(score_fake)
}

/// ∂g_gan/∂s = -σ(-s)/N, negative everywhere.
pub fn g_gan_backward<T: Scalar>(score_fake: &Array3<T>) -> Array3<T> {
    let n = score_fake.len() as f64;
    score_fake.mapv(|v| T::from_f64(-sigmoid(-v.to_f64()) / n))
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Scalar>(fake: &Array3<T>, real: &Array3<T>) -> Result<f64> {
    check_same_shape("l1_loss", fake, real)?;
    let n = fake.len() as f64;
    Ok(fake
        .iter()
        .zip(real.iter())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .sum::<f64>()
        / n)
}

pub fn l1_backward<T: Scalar>(fake: &Array3<T>, real: &Array3<T>) -> Array3<T> {
    let n = fake.len() as f64;
    let scale = T::from_f64(1.0 / n);
    let mut g = fake.clone();
    g.zip_mut_with(real, |a, &b| {
        let d = *a - b;
        *a = if d > T::zero() {
            scale
        } else if d < T::zero() {
            T::zero() - scale
        } else {
            T::zero()
        };
    });
    g
}

/// Mean squared difference over all elements.
pub fn l2_loss<T: Scalar>(fake: &Array3<T>, real: &Array3<T>) -> Result<f64> {
    check_same_shape("l2_loss", fake, real)?;
    let n = fake.len() as f64;
    Ok(fake
        .iter()
        .zip(real.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn l2_backward<T: Scalar>(fake: &Array3<T>, real: &Array3<T>) -> Array3<T> {
    let n = fake.len() as f64;
    let scale = T::from_f64(2.0 / n);
    let mut g = fake.clone();
    g.zip_mut_with(real, |a, &b| *a = scale * (*a - b));
    g
}

/// Stack tensors along the channel axis (generic twin of the pipeline
/// helper, needed for the float64 gradient checks).
pub fn concat<T: Scalar>(parts: &[&Array3<T>]) -> Array3<T> {
    let (h, w) = {
        let d = parts[0].dim();
        (d.1, d.2)
    };
    let total: usize = parts.iter().map(|p| p.dim().0).sum();
    let mut out = Array3::<T>::zeros((total, h, w));
    let mut at = 0;
    for p in parts {
        let c = p.dim().0;
        out.slice_mut(s![at..at + c, .., ..]).assign(p);
        at += c;
    }
    out
}

/// Pre-update loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub d: Option<f64>,
    pub g_gan: Option<f64>,
    /// Reconstruction distance (L1, or the configured CNN distance).
    pub recon: f64,
    /// Full generator objective: g_gan + λ·recon for cGAN, recon for CNN.
    pub g_total: f64,
}

/// Everything that evolves during training.
pub struct ModelState {
    pub config: TrainConfig,
    pub gen: Generator<f32>,
    pub disc: Option<Discriminator<f32>>,
    pub opt_g: Adam<f32>,
    pub opt_d: Option<Adam<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps; keys the per-step dropout stream.
    pub global_step: u64,
    pub norm: Option<NormBundle>,
}

impl ModelState {
    pub fn new(config: TrainConfig) -> Result<ModelState> {
        config.validate()?;
        let gen = Generator::new(&config.generator, config.seed)?;
        let (disc, opt_d) = if config.method == Method::Cgan {
            (
                Some(Discriminator::new(&config.discriminator, config.seed)?),
                Some(Adam::new(config.adam())),
            )
        } else {
            (None, None)
        };
        let opt_g = Adam::new(config.adam());
        Ok(ModelState {
            config,
            gen,
            disc,
            opt_g,
            opt_d,
            epoch: 0,
            global_step: 0,
            norm: None,
        })
    }
}

/// One optimization step on one pair: for cGAN the discriminator updates
/// first (real pass, then fake pass), then the generator updates against
/// the new discriminator. Returned losses are the pre-update values.
pub fn train_step(state: &mut ModelState, pair: &PatchPair) -> Result<StepLosses> {
    let ModelState {
        config,
        gen,
        disc,
        opt_g,
        opt_d,
        global_step,
        ..
    } = state;
    if pair.input.dim().0 != config.task.input_channels() {
        return Err(validation(format!(
            "pair has {} input channels, task {:?} expects {}",
            pair.input.dim().0,
            config.task,
            config.task.input_channels()
        )));
    }
    if pair.target.dim().0 != 4 {
        return Err(validation("pair target must have 4 channels"));
    }
    if (pair.input.dim().1, pair.input.dim().2) != (pair.target.dim().1, pair.target.dim().2) {
        return Err(validation("pair input/target spatial sizes differ"));
    }

    let mut drop_rng = derive_rng(config.seed, "dropout", *global_step);
    gen.zero_grad();
    let fake = gen.forward(&pair.input, Mode::Train, &mut drop_rng)?;

    let losses = match config.method {
        Method::Cnn => {
            let recon = config.cnn_distance.loss(&fake, &pair.target)?;
            let gfake = config.cnn_distance.backward(&fake, &pair.target);
            gen.backward(&gfake);
            opt_g.step(|f| gen.visit_params(f));
            StepLosses {
                d: None,
                g_gan: None,
                recon,
                g_total: recon,
            }
        }
        Method::Cgan => {
            let disc = disc.as_mut().expect("cGAN state carries a discriminator");
            let opt_d = opt_d.as_mut().expect("cGAN state carries a D optimizer");
            let real_pair = concat(&[&pair.input, &pair.target]);
            let fake_pair = concat(&[&pair.input, &fake]);

            // discriminator step: the two passes backpropagate separately,
            // parameter gradients accumulate across them
            disc.zero_grad();
            let s_real = disc.forward(&real_pair, Mode::Train)?;
            disc.backward(&d_loss_backward_real(&s_real), false);
            let s_fake = disc.forward(&fake_pair, Mode::Train)?;
            disc.backward(&d_loss_backward_fake(&s_fake), false);
            let d = d_loss(&s_real, &s_fake)?;
            opt_d.step(|f| disc.visit_params(f));

            // generator step against the updated discriminator
            disc.zero_grad();
            let s_fake2 = disc.forward(&fake_pair, Mode::Train)?;
            let g_gan = g_gan_loss(&s_fake2);
            let recon = l1_loss(&fake, &pair.target)?;
            let gpair = disc.backward(&g_gan_backward(&s_fake2), true);
            let n = config.task.input_channels();
            let gan_part = gpair.slice(s![n..n + 4, .., ..]);
            let lambda = config.lambda_l1 as f32;
            let mut gfake = l1_backward(&fake, &pair.target);
            gfake.zip_mut_with(&gan_part, |l, &g| *l = lambda * *l + g);
            gen.backward(&gfake);
            opt_g.step(|f| gen.visit_params(f));

            StepLosses {
                d: Some(d),
                g_gan: Some(g_gan),
                recon,
                g_total: g_gan + config.lambda_l1 * recon,
            }
        }
    };
    *global_step += 1;
    Ok(losses)
}

/// One loss-curve row per optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub d: Option<f64>,
    pub g_gan: Option<f64>,
    pub l1: f64,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,epoch,d_loss,g_gan,l1")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.epoch,
            opt(r.d),
            opt(r.g_gan),
            r.l1
        )?;
    }
    Ok(())
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub curve_path: Option<&'a Path>,
    pub verbose: bool,
}

/// Run the remaining epochs of the recipe: a seeded shuffle per epoch, one
/// step per pair, checkpoints every `checkpoint_every` epochs and at the
/// end. Returns the loss curve for the steps executed by this call.
pub fn fit(state: &mut ModelState, pairs: &[PatchPair], opts: &FitOptions) -> Result<Vec<CurveRow>> {
    if pairs.is_empty() {
        return Err(data_err("training set is empty"));
    }
    let epochs = state.config.epochs;
    let seed = state.config.seed;
    let mut curve = Vec::new();
    for epoch in state.epoch..epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut derive_rng(seed, "shuffle", epoch as u64));
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for idx in order {
            let losses = train_step(state, &pairs[idx])?;
            sums.0 += losses.d.unwrap_or(0.0);
            sums.1 += losses.g_gan.unwrap_or(0.0);
            sums.2 += losses.recon;
            curve.push(CurveRow {
                step: state.global_step,
                epoch: epoch + 1,
                d: losses.d,
                g_gan: losses.g_gan,
                l1: losses.recon,
            });
        }
        state.epoch = epoch + 1;
        let done = epoch + 1;
        if let Some(dir) = opts.checkpoint_dir {
            if done % state.config.checkpoint_every == 0 || done == epochs {
                std::fs::create_dir_all(dir)?;
                checkpoint::save_checkpoint(&dir.join(format!("epoch-{done:04}.ckp1")), state)?;
            }
        }
        if let Some(path) = opts.curve_path {
            write_curve(path, &curve)?;
        }
        if opts.verbose {
            let n = pairs.len() as f64;
            eprintln!(
                "epoch {done}/{epochs}  d {:.4}  g_gan {:.4}  l1 {:.4}  [{:.1}s]",
                sums.0 / n,
                sums.1 / n,
                sums.2 / n,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(curve)
}

/// Simulated optical mosaic over one split of a scene.
pub struct Mosaic {
    /// Reflectance mosaic; pixels outside the covered tiles are zero.
    pub image: Raster,
    /// Single-band 0/1 map of simulated pixels.
    pub coverage: Raster,
    pub tiles: usize,
}

/// Run the generator over every tile of the given split of a normalized
/// quartet and mosaic the denormalized outputs at their tile origins.
pub fn infer_scene(
    state: &mut ModelState,
    quartet: &SceneQuartet,
    split: Split,
) -> Result<Mosaic> {
    let norm = state
        .norm
        .clone()
        .ok_or_else(|| validation("model state lacks normalization statistics"))?;
    let records = extract_patches(quartet, PATCH);
    let selected: Vec<_> = records.into_iter().filter(|r| r.split == split).collect();
    if selected.is_empty() {
        return Err(data_err(format!(
            "scene {} has no {:?} tiles",
            quartet.name, split
        )));
    }
    let (h, w) = (quartet.o2.height(), quartet.o2.width());
    let mut image = Raster::zeros(h, w, optical_bands(), ValueDomain::Reflectance01);
    let mut coverage = Raster::zeros(h, w, vec!["coverage".to_string()], ValueDomain::Raw);
    let mut rng = derive_rng(state.config.seed, "infer", 0);
    for rec in &selected {
        let pair = assemble_input(quartet, state.config.task, rec.row, rec.col, PATCH)?;
        let out = state.gen.forward(&pair.input, Mode::Eval, &mut rng)?;
        let mut tile = Raster::zeros(PATCH, PATCH, optical_bands(), ValueDomain::NormalizedPm1);
        for y in 0..PATCH {
            for x in 0..PATCH {
                for c in 0..4 {
                    tile.set(y, x, c, out[[c, y, x]]);
                }
            }
        }
        let tile = denormalize(&tile, &norm.optical)?;
        for y in 0..PATCH {
            for x in 0..PATCH {
                for c in 0..4 {
                    image.set(rec.row + y, rec.col + x, c, tile.get(y, x, c));
                }
                coverage.set(rec.row + y, rec.col + x, 0, 1.0);
            }
        }
    }
    Ok(Mosaic {
        image,
        coverage,
        tiles: selected.len(),
    })
}

#[cfg(test)]
mod tests;
