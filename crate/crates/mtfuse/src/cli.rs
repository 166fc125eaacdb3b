//! Command-line plumbing. Every subcommand reads and writes one output
//! directory with a fixed layout; identical inputs and seeds reproduce
//! identical bytes. Progress and timing go to stderr, results to stdout.

use crate::error::{validation, Result};
use crate::experiment::{
    build_train_config, final_checkpoint_path, load_scene, render_table, run_evaluation,
    run_experiment, run_inference, run_training, save_scene, EvalRecord, ExperimentSpec, Manifest,
    MethodName, OutDir, Preset,
};
use crate::pipeline::{Split, Task};
use crate::synth::{generate_scene, SceneSpec};
use crate::train::TrainConfig;
use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mtfuse",
    version,
    about = "Multi-temporal SAR-to-optical image simulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    A,
    B,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::A => Task::A,
            TaskArg::B => Task::B,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a scene quartet from a scene spec file.
    Synth {
        /// Scene spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory root.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tile stored scenes into a manifest.
    Patchify {
        #[arg(long)]
        out: PathBuf,
        /// Manifest label; written to manifests/<label>.json.
        #[arg(long)]
        label: String,
        /// Scene name to include (repeat for several).
        #[arg(long = "scene", required = true)]
        scenes: Vec<String>,
    },
    /// Train one model from a manifest.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Manifest label to train from.
        #[arg(long)]
        manifest: String,
        /// Full training config (JSON); replaces the --method flags.
        #[arg(long, conflicts_with_all = ["method", "task", "preset", "seed", "epochs", "include_t1", "checkpoint_every"])]
        config: Option<PathBuf>,
        /// Method: CNN, cGAN, MTCNN or MTcGAN.
        #[arg(long, required_unless_present = "config")]
        method: Option<MethodName>,
        /// Consistency check: the task the method must address.
        #[arg(long)]
        task: Option<TaskArg>,
        #[arg(long, value_enum, default_value_t = Preset::Standard)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Add T1 SAR/optical pairs to single-temporal training sets.
        #[arg(long)]
        include_t1: bool,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
        /// Run label; defaults to the method name.
        #[arg(long, required_unless_present = "method")]
        label: Option<String>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Simulate one split of a scene with a trained checkpoint.
    Infer {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: String,
        /// Mosaic label; written to mosaics/<label>.ras1.
        #[arg(long)]
        label: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score a stored mosaic against a scene's T2 optical truth.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        /// Mosaic label to score; the report lands in reports/<label>.json.
        #[arg(long)]
        label: String,
        #[arg(long)]
        scene: String,
        /// Method name recorded in the report; defaults to the label.
        #[arg(long)]
        method: Option<String>,
    },
    /// Render a comparison table from stored reports.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Report files; defaults to every reports/*.json, sorted.
        files: Vec<PathBuf>,
    },
    /// Run a full experiment from one spec file: synthesize, patchify,
    /// train every method, simulate the test scene and tabulate scores.
    Experiment {
        /// Experiment spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch progress on stderr.
        #[arg(long)]
        verbose: bool,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Patchify { out, label, scenes } => cmd_patchify(&out, &label, &scenes),
        Command::Train {
            out,
            manifest,
            config,
            method,
            task,
            preset,
            seed,
            epochs,
            include_t1,
            checkpoint_every,
            label,
            quiet,
        } => {
            let (config, default_label) = match (config, method) {
                (Some(path), None) => (load_train_config(&path)?, None),
                (None, Some(name)) => {
                    if let Some(t) = task {
                        if Task::from(t) != name.task() {
                            return Err(validation(format!(
                                "method {} addresses task {:?}, not {:?}",
                                name.label(),
                                name.task(),
                                Task::from(t)
                            )));
                        }
                    }
                    let config = build_train_config(
                        name,
                        preset,
                        epochs,
                        seed,
                        checkpoint_every,
                        include_t1,
                    );
                    (config, Some(name.label().to_string()))
                }
                // clap enforces exactly one of --config/--method.
                _ => unreachable!(),
            };
            let label = label.or(default_label).expect("label is required");
            cmd_train(&out, &manifest, config, &label, !quiet)
        }
        Command::Infer {
            out,
            checkpoint,
            scene,
            label,
            split,
        } => cmd_infer(&out, &checkpoint, &scene, &label, split.into()),
        Command::Evaluate {
            out,
            label,
            scene,
            method,
        } => {
            let method = method.unwrap_or_else(|| label.clone());
            cmd_evaluate(&out, &label, &scene, &method)
        }
        Command::Report { out, files } => cmd_report(&out, &files),
        Command::Experiment {
            config,
            out,
            verbose,
        } => {
            let spec = ExperimentSpec::load(&config)?;
            let outcome = run_experiment(&spec, &OutDir::new(out), verbose)?;
            print!("{}", outcome.table);
            Ok(())
        }
    }
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let file = File::open(path).map_err(|e| {
        crate::error::data_err(format!("cannot open training config {}: {e}", path.display()))
    })?;
    let config: TrainConfig = serde_json::from_reader(BufReader::new(file))?;
    config.validate()?;
    Ok(config)
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = SceneSpec::load(config)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let out = OutDir::new(out);
    out.ensure()?;
    let quartet = generate_scene(&spec)?;
    save_scene(&out, &quartet)?;
    spec.save(&out.scenes().join(format!("{}.spec.json", spec.name)))?;
    let manifest = Manifest::build(&[&quartet]);
    let (train, test) = manifest.counts();
    println!(
        "scene {}: {}x{}, {} train tiles, {} test tiles",
        spec.name, spec.height, spec.width, train, test
    );
    Ok(())
}

fn cmd_patchify(out: &Path, label: &str, scenes: &[String]) -> Result<()> {
    let out = OutDir::new(out);
    out.ensure()?;
    let quartets: Vec<_> = scenes
        .iter()
        .map(|name| load_scene(&out, name))
        .collect::<Result<_>>()?;
    let refs: Vec<_> = quartets.iter().collect();
    let manifest = Manifest::build(&refs);
    manifest.save(&out.manifests().join(format!("{label}.json")))?;
    let (train, test) = manifest.counts();
    println!(
        "manifest {label}: {train} train tiles, {test} test tiles from {} scenes",
        scenes.len()
    );
    Ok(())
}

fn cmd_train(
    out: &Path,
    manifest: &str,
    config: TrainConfig,
    label: &str,
    verbose: bool,
) -> Result<()> {
    let out = OutDir::new(out);
    out.ensure()?;
    let epochs = config.epochs;
    let state = run_training(&out, manifest, config, label, verbose)?;
    let ckpt = final_checkpoint_path(&out, label, epochs);
    println!(
        "trained {label}: {} epochs, {} steps, checkpoint {}",
        state.epoch,
        state.global_step,
        ckpt.display()
    );
    Ok(())
}

fn cmd_infer(out: &Path, checkpoint: &Path, scene: &str, label: &str, split: Split) -> Result<()> {
    let out = OutDir::new(out);
    out.ensure()?;
    let mosaic = run_inference(&out, checkpoint, scene, split, label)?;
    println!(
        "mosaic {label}: {} tiles of scene {scene}, written to {}",
        mosaic.tiles,
        out.mosaics().join(format!("{label}.ras1")).display()
    );
    Ok(())
}

fn cmd_evaluate(out: &Path, label: &str, scene: &str, method: &str) -> Result<()> {
    let out = OutDir::new(out);
    out.ensure()?;
    let record = run_evaluation(&out, label, scene, method)?;
    let r = &record.report;
    let b = &record.baseline;
    println!(
        "{} on {scene}: PSNR {} dB, SSIM {:.4}, MSA {:.4} rad ({} pixels)",
        r.method, r.psnr_mean, r.ssim_mean, r.msa_radians, r.pixels
    );
    println!(
        "{}: PSNR {} dB, SSIM {:.4}, MSA {:.4} rad",
        b.method, b.psnr_mean, b.ssim_mean, b.msa_radians
    );
    Ok(())
}

fn cmd_report(out: &Path, files: &[PathBuf]) -> Result<()> {
    let out = OutDir::new(out);
    let paths: Vec<PathBuf> = if files.is_empty() {
        let mut found = Vec::new();
        let dir = out.reports();
        if dir.is_dir() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("json") {
                    found.push(path);
                }
            }
        }
        found.sort();
        found
    } else {
        files.to_vec()
    };
    if paths.is_empty() {
        return Err(validation("no report files found"));
    }
    let records: Vec<EvalRecord> = paths
        .iter()
        .map(|p| EvalRecord::load(p))
        .collect::<Result<_>>()?;
    print!("{}", render_table(&records));
    Ok(())
}
