//! Experiment orchestration: the output-directory layout, scene and
//! manifest persistence, the four method names, and the end-to-end
//! pipeline that turns one experiment spec into trained models, mosaics,
//! and a comparison table.

use crate::error::{data_err, validation, Result};
use crate::metrics::{self, MetricsReport, Psnr};
use crate::pipeline::{
    assemble_pair, enumerate_pairs, extract_patches, normalize_quartet, NormBundle, PatchPair,
    Split, Task, TileRecord, PATCH,
};
use crate::raster::{load_raster, save_raster, validate_quartet, Rect, SceneQuartet};
use crate::synth::{generate_scene, SceneSpec};
use crate::train::{
    checkpoint, fit, infer_scene, FitOptions, Method, ModelState, Mosaic, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

/// Fixed layout under one output root; every command reads and writes here.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> OutDir {
        OutDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn scenes(&self) -> PathBuf {
        self.root.join("scenes")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn mosaics(&self) -> PathBuf {
        self.root.join("mosaics")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn ensure(&self) -> Result<()> {
        for dir in [
            self.scenes(),
            self.manifests(),
            self.checkpoints(),
            self.mosaics(),
            self.reports(),
        ] {
            std::fs::create_dir_all(dir)?;
        }
        Ok(())
    }
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty()
        || !label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(validation(format!(
            "label {label:?} must be non-empty and use only [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

// ---- scene persistence ----

#[derive(Serialize, Deserialize)]
struct SceneSidecar {
    name: String,
    train_region: Vec<Rect>,
    test_region: Vec<Rect>,
}

/// Write a quartet as four RAS1 files plus a region sidecar.
pub fn save_scene(out: &OutDir, quartet: &SceneQuartet) -> Result<()> {
    check_label(&quartet.name)?;
    let dir = out.scenes();
    let name = &quartet.name;
    for (tag, raster) in [
        ("s1", &quartet.s1),
        ("o1", &quartet.o1),
        ("s2", &quartet.s2),
        ("o2", &quartet.o2),
    ] {
        save_raster(raster, &dir.join(format!("{name}-{tag}.ras1")))?;
    }
    let sidecar = SceneSidecar {
        name: name.clone(),
        train_region: quartet.train_region.clone(),
        test_region: quartet.test_region.clone(),
    };
    let file = File::create(dir.join(format!("{name}.scene.json")))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
    Ok(())
}

pub fn load_scene(out: &OutDir, name: &str) -> Result<SceneQuartet> {
    check_label(name)?;
    let dir = out.scenes();
    let sidecar_path = dir.join(format!("{name}.scene.json"));
    let file = File::open(&sidecar_path).map_err(|e| {
        data_err(format!("cannot open scene sidecar {}: {e}", sidecar_path.display()))
    })?;
    let sidecar: SceneSidecar = serde_json::from_reader(BufReader::new(file))?;
    if sidecar.name != name {
        return Err(validation(format!(
            "scene sidecar {} names scene {:?}",
            sidecar_path.display(),
            sidecar.name
        )));
    }
    let load = |tag: &str| load_raster(&dir.join(format!("{name}-{tag}.ras1")));
    validate_quartet(
        name,
        load("s1")?,
        load("o1")?,
        load("s2")?,
        load("o2")?,
        sidecar.train_region,
        sidecar.test_region,
    )
}

// ---- manifests ----

/// Tile inventory of one training/evaluation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub patch: usize,
    pub records: Vec<TileRecord>,
}

impl Manifest {
    pub fn build(scenes: &[&SceneQuartet]) -> Manifest {
        let mut records = Vec::new();
        for q in scenes {
            records.extend(extract_patches(q, PATCH));
        }
        Manifest {
            patch: PATCH,
            records,
        }
    }

    pub fn scene_names(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.scene.clone()).collect()
    }

    /// (train tiles, test tiles).
    pub fn counts(&self) -> (usize, usize) {
        let train = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .count();
        (train, self.records.len() - train)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let file = File::open(path)
            .map_err(|e| data_err(format!("cannot open manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_reader(BufReader::new(file))?;
        if m.patch == 0 {
            return Err(validation("manifest patch size must be positive"));
        }
        Ok(m)
    }
}

// ---- method naming ----

/// The four trainable methods: single-temporal CNN/cGAN take the T2 SAR
/// pair alone, the MT variants add the T1 SAR/optical stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum MethodName {
    #[serde(rename = "CNN")]
    #[value(name = "CNN", alias = "cnn")]
    Cnn,
    #[serde(rename = "cGAN")]
    #[value(name = "cGAN", alias = "cgan")]
    Cgan,
    #[serde(rename = "MTCNN")]
    #[value(name = "MTCNN", alias = "mtcnn")]
    Mtcnn,
    #[serde(rename = "MTcGAN")]
    #[value(name = "MTcGAN", alias = "mtcgan")]
    Mtcgan,
}

impl MethodName {
    pub fn label(self) -> &'static str {
        match self {
            MethodName::Cnn => "CNN",
            MethodName::Cgan => "cGAN",
            MethodName::Mtcnn => "MTCNN",
            MethodName::Mtcgan => "MTcGAN",
        }
    }

    pub fn task(self) -> Task {
        match self {
            MethodName::Cnn | MethodName::Cgan => Task::A,
            MethodName::Mtcnn | MethodName::Mtcgan => Task::B,
        }
    }

    pub fn method(self) -> Method {
        match self {
            MethodName::Cnn | MethodName::Mtcnn => Method::Cnn,
            MethodName::Cgan | MethodName::Mtcgan => Method::Cgan,
        }
    }
}

/// Network width tier; the recipe itself never changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Standard,
    Small,
    Mini,
}

pub fn build_train_config(
    name: MethodName,
    preset: Preset,
    epochs: usize,
    seed: u64,
    checkpoint_every: usize,
    include_t1_pairs: bool,
) -> TrainConfig {
    let task = name.task();
    let mut config = match preset {
        Preset::Standard => TrainConfig::standard(task, name.method(), seed),
        Preset::Small => TrainConfig::small(task, name.method(), seed),
        Preset::Mini => {
            let n = task.input_channels();
            TrainConfig {
                generator: crate::net::GeneratorArch::mini(n),
                discriminator: crate::net::DiscriminatorArch::mini(n + 4),
                ..TrainConfig::standard(task, name.method(), seed)
            }
        }
    };
    config.epochs = epochs;
    config.checkpoint_every = checkpoint_every;
    config.include_t1_pairs = include_t1_pairs;
    config
}

// ---- dataset assembly ----

/// Load and normalize every scene a manifest references.
///
/// Normalization statistics pool the manifest's scenes: SAR bounds from S1
/// and S2, optical bounds from O1 only.
pub fn prepare_scenes(
    out: &OutDir,
    manifest: &Manifest,
) -> Result<(NormBundle, BTreeMap<String, SceneQuartet>)> {
    let names = manifest.scene_names();
    if names.is_empty() {
        return Err(data_err("manifest holds no tiles"));
    }
    let mut raw = BTreeMap::new();
    for name in &names {
        raw.insert(name.clone(), load_scene(out, name)?);
    }
    let refs: Vec<&SceneQuartet> = raw.values().collect();
    let bundle = NormBundle::from_scenes(&refs, (1.0, 99.0))?;
    let mut normalized = BTreeMap::new();
    for (name, q) in &raw {
        normalized.insert(name.clone(), normalize_quartet(q, &bundle)?);
    }
    Ok((bundle, normalized))
}

/// Materialize the training pairs a manifest implies for a task.
pub fn assemble_pairs(
    normalized: &BTreeMap<String, SceneQuartet>,
    manifest: &Manifest,
    task: Task,
    include_t1: bool,
) -> Result<Vec<PatchPair>> {
    let refs = enumerate_pairs(&manifest.records, task, include_t1);
    let mut pairs = Vec::with_capacity(refs.len());
    for r in refs {
        let quartet = normalized.get(&r.scene).ok_or_else(|| {
            data_err(format!("manifest references unknown scene {:?}", r.scene))
        })?;
        pairs.push(assemble_pair(
            quartet,
            task,
            r.time,
            r.row,
            r.col,
            manifest.patch,
        )?);
    }
    Ok(pairs)
}

// ---- drivers ----

/// Train one model from a manifest; returns the final state. Checkpoints
/// and the loss curve land in `checkpoints/<run_label>/`.
pub fn run_training(
    out: &OutDir,
    manifest_label: &str,
    config: TrainConfig,
    run_label: &str,
    verbose: bool,
) -> Result<ModelState> {
    check_label(run_label)?;
    config.validate()?;
    let manifest = Manifest::load(&out.manifests().join(format!("{manifest_label}.json")))?;
    let (bundle, normalized) = prepare_scenes(out, &manifest)?;
    let pairs = assemble_pairs(
        &normalized,
        &manifest,
        config.task,
        config.include_t1_pairs,
    )?;
    let mut state = ModelState::new(config)?;
    state.norm = Some(bundle);
    let run_dir = out.checkpoints().join(run_label);
    std::fs::create_dir_all(&run_dir)?;
    let curve = run_dir.join("curve.csv");
    let opts = FitOptions {
        checkpoint_dir: Some(&run_dir),
        curve_path: Some(&curve),
        verbose,
    };
    fit(&mut state, &pairs, &opts)?;
    Ok(state)
}

pub fn final_checkpoint_path(out: &OutDir, run_label: &str, epochs: usize) -> PathBuf {
    out.checkpoints()
        .join(run_label)
        .join(format!("epoch-{epochs:04}.ckp1"))
}

/// Run a checkpointed model over one split of a scene and persist the
/// mosaic and its coverage map under `mosaics/<label>`.
pub fn run_inference(
    out: &OutDir,
    checkpoint_path: &Path,
    scene: &str,
    split: Split,
    label: &str,
) -> Result<Mosaic> {
    check_label(label)?;
    let mut state = checkpoint::load_checkpoint(checkpoint_path)?;
    let quartet = load_scene(out, scene)?;
    let bundle = state
        .norm
        .clone()
        .ok_or_else(|| validation("checkpoint lacks normalization statistics"))?;
    let normalized = normalize_quartet(&quartet, &bundle)?;
    let mosaic = infer_scene(&mut state, &normalized, split)?;
    save_raster(&mosaic.image, &out.mosaics().join(format!("{label}.ras1")))?;
    save_raster(
        &mosaic.coverage,
        &out.mosaics().join(format!("{label}.coverage.ras1")),
    )?;
    Ok(mosaic)
}

/// One method's scores next to the persistence baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: String,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
}

impl EvalRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalRecord> {
        let file = File::open(path)
            .map_err(|e| data_err(format!("cannot open report {}: {e}", path.display())))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Score a stored mosaic against a scene's T2 optical truth on the test
/// tiles, with the scene's O1 image as the baseline.
pub fn run_evaluation(
    out: &OutDir,
    mosaic_label: &str,
    scene: &str,
    method: &str,
) -> Result<EvalRecord> {
    check_label(mosaic_label)?;
    let image = load_raster(&out.mosaics().join(format!("{mosaic_label}.ras1")))?;
    let coverage = load_raster(&out.mosaics().join(format!("{mosaic_label}.coverage.ras1")))?;
    let quartet = load_scene(out, scene)?;
    let tiles: Vec<Rect> = extract_patches(&quartet, PATCH)
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| Rect::new(r.row, r.col, PATCH, PATCH))
        .collect();
    if tiles.is_empty() {
        return Err(data_err(format!("scene {scene} has no test tiles")));
    }
    for rect in &tiles {
        for y in rect.row..rect.row + rect.height {
            for x in rect.col..rect.col + rect.width {
                if coverage.get(y, x, 0) != 1.0 {
                    return Err(data_err(format!(
                        "mosaic {mosaic_label} does not cover test pixel ({y}, {x})"
                    )));
                }
            }
        }
    }
    let (report, baseline) = metrics::evaluate(method, &image, &quartet.o2, &quartet.o1, &tiles)?;
    let record = EvalRecord {
        scene: scene.to_string(),
        report,
        baseline,
    };
    record.save(&out.reports().join(format!("{mosaic_label}.json")))?;
    Ok(record)
}

// ---- comparison table ----

fn fmt_psnr(p: Psnr) -> String {
    p.to_string()
}

/// Aligned text table: one column per method (plus the shared baseline),
/// one row per metric, best value per row marked with `*`.
///
/// The baseline column appears only when every record agrees on it;
/// otherwise a warning goes to stderr and the column is dropped.
pub fn render_table(records: &[EvalRecord]) -> String {
    let mut columns: Vec<(String, Psnr, f64, f64)> = records
        .iter()
        .map(|r| {
            (
                r.report.method.clone(),
                r.report.psnr_mean,
                r.report.ssim_mean,
                r.report.msa_radians,
            )
        })
        .collect();
    let baseline = records.first().map(|r| &r.baseline);
    let consistent = records
        .iter()
        .all(|r| Some(&r.baseline) == baseline && r.scene == records[0].scene);
    match (baseline, consistent) {
        (Some(b), true) => {
            columns.push((b.method.clone(), b.psnr_mean, b.ssim_mean, b.msa_radians));
        }
        (Some(_), false) => {
            eprintln!("warning: records disagree on the baseline; omitting its column");
        }
        (None, _) => {}
    }

    let best_psnr = columns
        .iter()
        .map(|c| c.1)
        .fold(None::<Psnr>, |acc, p| match acc {
            None => Some(p),
            Some(a) => Some(if p.at_least(a) { p } else { a }),
        });
    let best_ssim = columns.iter().map(|c| c.2).fold(f64::MIN, f64::max);
    let best_msa = columns.iter().map(|c| c.3).fold(f64::MAX, f64::min);

    let mut cells: Vec<Vec<String>> = vec![vec!["".to_string()]; 4];
    cells[0][0] = "metric".to_string();
    cells[1][0] = "PSNR (dB)".to_string();
    cells[2][0] = "SSIM".to_string();
    cells[3][0] = "MSA (rad)".to_string();
    for (name, psnr, ssim, msa) in &columns {
        cells[0].push(name.clone());
        let star = |best: bool| if best { "*" } else { "" };
        cells[1].push(format!(
            "{}{}",
            fmt_psnr(*psnr),
            star(best_psnr == Some(*psnr) || matches!(psnr, Psnr::Exact))
        ));
        cells[2].push(format!("{:.4}{}", ssim, star(*ssim == best_ssim)));
        cells[3].push(format!("{:.4}{}", msa, star(*msa == best_msa)));
    }

    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut outbuf = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:>width$}", width = widths[c]))
            .collect();
        outbuf.push_str(&line.join("  "));
        outbuf.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            outbuf.push_str(&"-".repeat(total));
            outbuf.push('\n');
        }
    }
    outbuf
}

// ---- one-spec-file experiments ----

fn default_epochs() -> usize {
    200
}
fn default_checkpoint_every() -> usize {
    50
}
fn default_preset() -> Preset {
    Preset::Standard
}

/// A full Case-style protocol: synthesize scenes, train the listed
/// methods on the chosen training set, simulate the test scene's test
/// region, and score everything against the persistence baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub label: String,
    /// Scenes to synthesize (names must be unique).
    pub scenes: Vec<SceneSpec>,
    /// Scenes whose train tiles form the training set.
    pub train_scenes: Vec<String>,
    /// Scene whose test tiles are simulated and scored.
    pub test_scene: String,
    pub methods: Vec<MethodName>,
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub include_t1_pairs: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        check_label(&self.label)?;
        let mut names = BTreeSet::new();
        for s in &self.scenes {
            s.validate()?;
            if !names.insert(s.name.clone()) {
                return Err(validation(format!("duplicate scene name {:?}", s.name)));
            }
        }
        for t in &self.train_scenes {
            if !names.contains(t) {
                return Err(validation(format!(
                    "train scene {t:?} is not among the synthesized scenes"
                )));
            }
        }
        if self.train_scenes.is_empty() {
            return Err(validation("experiment needs at least one training scene"));
        }
        let test_spec = self
            .scenes
            .iter()
            .find(|s| s.name == self.test_scene)
            .ok_or_else(|| {
                validation(format!(
                    "test scene {:?} is not among the synthesized scenes",
                    self.test_scene
                ))
            })?;
        let (_, test_rects) = crate::synth::SceneModel::build(test_spec)?.regions();
        let has_test_tile = crate::pipeline::tile_grid(test_spec.height, test_spec.width, PATCH)
            .into_iter()
            .any(|(r, c)| test_rects.iter().any(|rect| rect.contains_tile(r, c, PATCH)));
        if !has_test_tile {
            return Err(validation(format!(
                "test scene {:?} has no test tiles",
                self.test_scene
            )));
        }
        if self.methods.is_empty() {
            return Err(validation("experiment lists no methods"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m.label()) {
                return Err(validation(format!("method {} listed twice", m.label())));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        let file = File::open(path)
            .map_err(|e| data_err(format!("cannot open experiment spec {}: {e}", path.display())))?;
        let spec: ExperimentSpec = serde_json::from_reader(BufReader::new(file))?;
        spec.validate()?;
        Ok(spec)
    }
}

pub struct ExperimentOutcome {
    pub records: Vec<EvalRecord>,
    pub table: String,
}

pub fn run_experiment(spec: &ExperimentSpec, out: &OutDir, verbose: bool) -> Result<ExperimentOutcome> {
    spec.validate()?;
    out.ensure()?;

    for scene_spec in &spec.scenes {
        if verbose {
            eprintln!("synthesizing scene {}", scene_spec.name);
        }
        let quartet = generate_scene(scene_spec)?;
        save_scene(out, &quartet)?;
        scene_spec.save(&out.scenes().join(format!("{}.spec.json", scene_spec.name)))?;
    }

    let manifest_label = format!("{}-train", spec.label);
    let quartets: Vec<SceneQuartet> = spec
        .train_scenes
        .iter()
        .map(|name| load_scene(out, name))
        .collect::<Result<_>>()?;
    let refs: Vec<&SceneQuartet> = quartets.iter().collect();
    let manifest = Manifest::build(&refs);
    manifest.save(&out.manifests().join(format!("{manifest_label}.json")))?;

    let mut records = Vec::new();
    for &method in &spec.methods {
        let run_label = format!("{}-{}", spec.label, method.label());
        if verbose {
            eprintln!("training {run_label}");
        }
        let config = build_train_config(
            method,
            spec.preset,
            spec.epochs,
            spec.seed,
            spec.checkpoint_every,
            spec.include_t1_pairs,
        );
        run_training(out, &manifest_label, config, &run_label, verbose)?;
        let ckpt = final_checkpoint_path(out, &run_label, spec.epochs);
        if verbose {
            eprintln!("simulating {} with {run_label}", spec.test_scene);
        }
        run_inference(out, &ckpt, &spec.test_scene, Split::Test, &run_label)?;
        records.push(run_evaluation(
            out,
            &run_label,
            &spec.test_scene,
            method.label(),
        )?);
    }

    let table = render_table(&records);
    std::fs::write(
        out.reports().join(format!("{}-table.txt", spec.label)),
        &table,
    )?;
    Ok(ExperimentOutcome { records, table })
}

#[cfg(test)]
mod tests;
