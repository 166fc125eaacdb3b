//! Normalization and patch extraction.
//!
//! Scenes are normalized per band to [-1, 1] (percentile clip, then affine),
//! cut into non-overlapping 256×256 tiles from the (0, 0) origin, and
//! assembled into model inputs: Task A feeds the T2 SAR tile alone, Task B
//! concatenates [S1, O1, S2] into an 8-channel input. Targets are always the
//! 4-band T2 optical tile.

use crate::error::{data_err, validation, Result};
use crate::raster::{Raster, SceneQuartet, ValueDomain};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const PATCH: usize = 256;

/// Floor applied before the log transform; SAR intensities at or below zero
/// clamp here instead of producing -inf.
pub const LOG_FLOOR: f64 = 1e-6;

/// Which network input the sample feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// S2 → O2 (mono-temporal, 2 input channels).
    A,
    /// [S1, O1, S2] → O2 (multi-temporal fusion, 8 input channels).
    B,
}

impl Task {
    pub fn input_channels(self) -> usize {
        match self {
            Task::A => 2,
            Task::B => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Value transform applied before percentile clipping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Linear,
    /// log of the value (floored at [`LOG_FLOOR`]), then linear clip. Used
    /// for SAR bands because speckle is multiplicative.
    LogThenLinear,
}

impl Transform {
    /// SAR band sets (VV/VH) get the log transform, everything else linear.
    pub fn for_bands(bands: &[String]) -> Transform {
        if !bands.is_empty() && bands.iter().all(|b| b == "VV" || b == "VH") {
            Transform::LogThenLinear
        } else {
            Transform::Linear
        }
    }

    #[inline]
    fn forward(self, v: f64) -> f64 {
        match self {
            Transform::Linear => v,
            Transform::LogThenLinear => v.max(LOG_FLOOR).ln(),
        }
    }

    #[inline]
    fn inverse(self, t: f64) -> f64 {
        match self {
            Transform::Linear => t,
            Transform::LogThenLinear => t.exp(),
        }
    }
}

/// Per-band clip bounds (in the transformed domain) plus the transform tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub bands: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub transform: Transform,
}

impl NormStats {
    fn check(&self) -> Result<()> {
        if self.lower.len() != self.bands.len() || self.upper.len() != self.bands.len() {
            return Err(validation("norm stats bound count does not match bands"));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) {
                return Err(validation(format!(
                    "degenerate band {}: lower {lo} not below upper {hi}",
                    self.bands[i]
                )));
            }
        }
        Ok(())
    }

    fn match_raster(&self, raster: &Raster) -> Result<()> {
        if raster.bands() != self.bands.as_slice() {
            return Err(validation(format!(
                "band mismatch: stats cover {:?}, raster has {:?}",
                self.bands,
                raster.bands()
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile clip bounds pooled over several rasters of the same band set.
pub fn compute_norm_stats_pooled(
    rasters: &[&Raster],
    percentiles: (f64, f64),
) -> Result<NormStats> {
    let (p_lo, p_hi) = percentiles;
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(validation(format!(
            "percentiles must satisfy 0 <= lower < upper <= 100, got ({p_lo}, {p_hi})"
        )));
    }
    let first = rasters
        .first()
        .ok_or_else(|| validation("no rasters for norm stats"))?;
    let bands = first.bands().to_vec();
    for r in rasters {
        if r.bands() != bands.as_slice() {
            return Err(validation(format!(
                "pooled rasters disagree on bands: {:?} vs {:?}",
                bands,
                r.bands()
            )));
        }
    }
    let transform = Transform::for_bands(&bands);
    let mut lower = Vec::with_capacity(bands.len());
    let mut upper = Vec::with_capacity(bands.len());
    for c in 0..bands.len() {
        let mut values: Vec<f64> = Vec::new();
        for r in rasters {
            values.extend(r.band_values(c).map(|v| transform.forward(v as f64)));
        }
        values.sort_unstable_by(f64::total_cmp);
        let lo = percentile_sorted(&values, p_lo);
        let hi = percentile_sorted(&values, p_hi);
        if !(lo < hi) {
            return Err(validation(format!("degenerate band {}", bands[c])));
        }
        lower.push(lo);
        upper.push(hi);
    }
    let stats = NormStats {
        bands,
        lower,
        upper,
        transform,
    };
    stats.check()?;
    Ok(stats)
}

/// Percentile clip bounds for a single raster.
pub fn compute_norm_stats(raster: &Raster, percentiles: (f64, f64)) -> Result<NormStats> {
    compute_norm_stats_pooled(&[raster], percentiles)
}

/// Clip to the stats bounds and map affinely to [-1, 1].
pub fn normalize(raster: &Raster, stats: &NormStats) -> Result<Raster> {
    stats.check()?;
    stats.match_raster(raster)?;
    let channels = raster.channels();
    let mut out = raster.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        let (lo, hi) = (stats.lower[c], stats.upper[c]);
        let t = stats.transform.forward(*v as f64).clamp(lo, hi);
        let y = 2.0 * (t - lo) / (hi - lo) - 1.0;
        *v = (y as f32).clamp(-1.0, 1.0);
    }
    out.set_value_domain(ValueDomain::NormalizedPm1);
    Ok(out)
}

/// Inverse of [`normalize`] on [-1, 1]; the clip itself is not invertible.
pub fn denormalize(raster: &Raster, stats: &NormStats) -> Result<Raster> {
    stats.check()?;
    stats.match_raster(raster)?;
    if raster.value_domain() != ValueDomain::NormalizedPm1 {
        return Err(validation(format!(
            "denormalize expects normalized_pm1 input, got {:?}",
            raster.value_domain()
        )));
    }
    let channels = raster.channels();
    let mut out = raster.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        let (lo, hi) = (stats.lower[c], stats.upper[c]);
        let t = (*v as f64 + 1.0) / 2.0 * (hi - lo) + lo;
        *v = stats.transform.inverse(t) as f32;
    }
    out.set_value_domain(match stats.transform {
        Transform::Linear => ValueDomain::Reflectance01,
        Transform::LogThenLinear => ValueDomain::Raw,
    });
    Ok(out)
}

/// SAR and optical stats for one training distribution, persisted as JSON.
///
/// SAR bounds pool S1 and S2 (both are network inputs); optical bounds come
/// from O1 alone so that the target normalization never peeks at T2 imagery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBundle {
    pub sar: NormStats,
    pub optical: NormStats,
}

impl NormBundle {
    pub fn from_scenes(scenes: &[&SceneQuartet], percentiles: (f64, f64)) -> Result<NormBundle> {
        let mut sar: Vec<&Raster> = Vec::new();
        let mut optical: Vec<&Raster> = Vec::new();
        for q in scenes {
            sar.push(&q.s1);
            sar.push(&q.s2);
            optical.push(&q.o1);
        }
        Ok(NormBundle {
            sar: compute_norm_stats_pooled(&sar, percentiles)?,
            optical: compute_norm_stats_pooled(&optical, percentiles)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NormBundle> {
        let file = File::open(path)?;
        let bundle: NormBundle = serde_json::from_reader(BufReader::new(file))?;
        bundle.sar.check()?;
        bundle.optical.check()?;
        Ok(bundle)
    }
}

/// Normalize all four rasters of a quartet with the bundle's stats.
pub fn normalize_quartet(quartet: &SceneQuartet, bundle: &NormBundle) -> Result<SceneQuartet> {
    Ok(SceneQuartet {
        name: quartet.name.clone(),
        s1: normalize(&quartet.s1, &bundle.sar)?,
        o1: normalize(&quartet.o1, &bundle.optical)?,
        s2: normalize(&quartet.s2, &bundle.sar)?,
        o2: normalize(&quartet.o2, &bundle.optical)?,
        train_region: quartet.train_region.clone(),
        test_region: quartet.test_region.clone(),
    })
}

/// One kept tile of a scene's patch grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub scene: String,
    pub row: usize,
    pub col: usize,
    pub split: Split,
}

/// Top-left corners of the non-overlapping `patch`-sized grid from (0, 0).
/// Right and bottom strips that do not fit are dropped.
pub fn tile_grid(height: usize, width: usize, patch: usize) -> Vec<(usize, usize)> {
    let rows = height / patch;
    let cols = width / patch;
    let mut grid = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            grid.push((r * patch, c * patch));
        }
    }
    grid
}

/// Tile the quartet and assign splits from its train/test rectangles.
///
/// A tile must lie entirely inside a rectangle to take its split; tiles that
/// straddle regions or fall outside both are discarded so no pixel feeds both
/// training and evaluation.
pub fn extract_patches(quartet: &SceneQuartet, patch: usize) -> Vec<TileRecord> {
    let mut records = Vec::new();
    for (row, col) in tile_grid(quartet.s1.height(), quartet.s1.width(), patch) {
        let in_train = quartet
            .train_region
            .iter()
            .any(|r| r.contains_tile(row, col, patch));
        let in_test = quartet
            .test_region
            .iter()
            .any(|r| r.contains_tile(row, col, patch));
        let split = match (in_train, in_test) {
            (true, false) => Split::Train,
            (false, true) => Split::Test,
            _ => continue,
        };
        records.push(TileRecord {
            scene: quartet.name.clone(),
            row,
            col,
            split,
        });
    }
    records
}

pub fn write_manifest(records: &[TileRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<TileRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TileRecord = serde_json::from_str(&line).map_err(|e| {
            data_err(format!(
                "{}: malformed manifest line {}: {e}",
                path.display(),
                i + 1
            ))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Acquisition time of a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Time {
    T1,
    T2,
}

/// A concrete (input, target) sample: a tile of a scene at one time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub scene: String,
    pub row: usize,
    pub col: usize,
    pub time: Time,
}

/// Training pairs implied by a manifest.
///
/// T2 pairs come from train tiles. For Task A, `include_t1` additionally
/// turns every manifest tile (train and test) into an S1 → O1 pair: T1
/// optical truth is available everywhere, so the mono-temporal model may
/// train on it without touching T2 test targets.
pub fn enumerate_pairs(records: &[TileRecord], task: Task, include_t1: bool) -> Vec<PairRef> {
    let mut pairs: Vec<PairRef> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| PairRef {
            scene: r.scene.clone(),
            row: r.row,
            col: r.col,
            time: Time::T2,
        })
        .collect();
    if task == Task::A && include_t1 {
        pairs.extend(records.iter().map(|r| PairRef {
            scene: r.scene.clone(),
            row: r.row,
            col: r.col,
            time: Time::T1,
        }));
    }
    pairs
}

/// Input/target tile pair in channel-major layout, ready for the networks.
#[derive(Clone, Debug)]
pub struct PatchPair {
    /// (n, 256, 256) with n = 2 (Task A) or 8 (Task B), values in [-1, 1].
    pub input: Array3<f32>,
    /// (4, 256, 256), values in [-1, 1].
    pub target: Array3<f32>,
    pub scene: String,
    pub row: usize,
    pub col: usize,
}

/// Copy a spatial window of an interleaved raster into a (C, H, W) tensor.
pub fn crop_to_chw(raster: &Raster, row: usize, col: usize, size: usize) -> Result<Array3<f32>> {
    if row + size > raster.height() || col + size > raster.width() {
        return Err(validation(format!(
            "tile ({row},{col})+{size} exceeds raster {}x{}",
            raster.height(),
            raster.width()
        )));
    }
    let channels = raster.channels();
    let mut out = Array3::<f32>::zeros((channels, size, size));
    for y in 0..size {
        for x in 0..size {
            let base = ((row + y) * raster.width() + (col + x)) * channels;
            for c in 0..channels {
                out[[c, y, x]] = raster.data()[base + c];
            }
        }
    }
    Ok(out)
}

/// Stack tensors along the channel axis.
pub fn concat_channels(parts: &[&Array3<f32>]) -> Array3<f32> {
    let (h, w) = {
        let d = parts[0].dim();
        (d.1, d.2)
    };
    let total: usize = parts.iter().map(|p| p.dim().0).sum();
    let mut out = Array3::<f32>::zeros((total, h, w));
    let mut at = 0;
    for p in parts {
        let c = p.dim().0;
        out.slice_mut(ndarray::s![at..at + c, .., ..]).assign(p);
        at += c;
    }
    out
}

fn require_normalized(label: &str, raster: &Raster) -> Result<()> {
    if raster.value_domain() != ValueDomain::NormalizedPm1 {
        return Err(validation(format!(
            "mixed normalization domains: {label} is {:?}, expected normalized_pm1",
            raster.value_domain()
        )));
    }
    Ok(())
}

/// Build the model input/target for one tile of a normalized quartet.
///
/// Task B input channel order is [S1-VV, S1-VH, O1-R, O1-G, O1-B, O1-NIR,
/// S2-VV, S2-VH]; checkpoints record this order.
pub fn assemble_pair(
    quartet: &SceneQuartet,
    task: Task,
    time: Time,
    row: usize,
    col: usize,
    patch: usize,
) -> Result<PatchPair> {
    for (label, raster) in [
        ("s1", &quartet.s1),
        ("o1", &quartet.o1),
        ("s2", &quartet.s2),
        ("o2", &quartet.o2),
    ] {
        require_normalized(label, raster)?;
    }
    let (input, target) = match (task, time) {
        (Task::A, Time::T2) => (
            crop_to_chw(&quartet.s2, row, col, patch)?,
            crop_to_chw(&quartet.o2, row, col, patch)?,
        ),
        (Task::A, Time::T1) => (
            crop_to_chw(&quartet.s1, row, col, patch)?,
            crop_to_chw(&quartet.o1, row, col, patch)?,
        ),
        (Task::B, Time::T2) => {
            let s1 = crop_to_chw(&quartet.s1, row, col, patch)?;
            let o1 = crop_to_chw(&quartet.o1, row, col, patch)?;
            let s2 = crop_to_chw(&quartet.s2, row, col, patch)?;
            (
                concat_channels(&[&s1, &o1, &s2]),
                crop_to_chw(&quartet.o2, row, col, patch)?,
            )
        }
        (Task::B, Time::T1) => {
            return Err(validation("Task B has no T1 pairs"));
        }
    };
    debug_assert_eq!(input.dim().0, task.input_channels());
    Ok(PatchPair {
        input,
        target,
        scene: quartet.name.clone(),
        row,
        col,
    })
}

/// T2 input/target for one tile (the common case).
pub fn assemble_input(
    quartet: &SceneQuartet,
    task: Task,
    row: usize,
    col: usize,
    patch: usize,
) -> Result<PatchPair> {
    assemble_pair(quartet, task, Time::T2, row, col, patch)
}
