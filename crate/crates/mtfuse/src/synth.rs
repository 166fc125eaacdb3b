//! Deterministic synthetic scene quartets.
//!
//! A scene is a seeded Voronoi segmentation of the image plane. Each segment
//! carries two latent factors (u, v) that set its 4-band optical signature
//! through a palette; SAR images are a fixed linear band mixing of the
//! optical image with multiplicative gamma speckle on top. Between T1 and T2
//! a chosen fraction of segments redraws its latents, everything else stays
//! pixel-identical, so "copy O1 where nothing changed, infer the change from
//! the SAR pair" is exactly the optimal strategy and can be scored against a
//! closed-form oracle.
//!
//! Information budget, by construction:
//! - SAR mixes almost only R and NIR, so the SAR pair determines (u, v) up
//!   to speckle noise, but never the G/B completion or the texture phase.
//! - G and B follow the palette (plus per-segment jitter), so models trained
//!   on one palette mispredict G/B under another: domain shift is real.
//! - Texture is shared between O1 and O2; a mono-temporal model cannot know
//!   it and pays an irreducible error a multi-temporal model avoids.

use crate::error::{data_err, validation, Result};
use crate::pipeline::Time;
use crate::raster::{optical_bands, sar_bands, Raster, Rect, SceneQuartet, ValueDomain};
use crate::seed::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Linear SAR mixing map, bias then R, G, B, NIR weights.
///
/// Nearly rank-2 over (R, NIR): the 2×2 subsystem has determinant
/// 0.55·0.55 − 0.35·0.30 ≈ 0.20, so the SAR pair pins down (u, v) while G/B
/// contribute only 2% each and stay effectively unobservable.
pub const MIX_VV: [f64; 5] = [0.06, 0.55, 0.02, 0.02, 0.35];
pub const MIX_VH: [f64; 5] = [0.04, 0.30, 0.02, 0.02, 0.55];

/// Minimum latent-space distance between a changed segment's old and new
/// factors; keeps injected changes visible above speckle.
pub const MIN_CHANGE_DIST: f64 = 0.15;

/// Per-segment jitter amplitude on the G/B completion.
pub const JITTER_AMP: f64 = 0.02;

/// Value-noise lattice cell size in pixels.
const TEXTURE_CELL: usize = 16;

/// How a segment's latent factors become a 4-band signature. Palettes share
/// the R/NIR rule and differ in the G/B completion, so cross-palette
/// evaluation exposes domain shift without touching SAR observability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    #[default]
    Temperate,
    Arid,
}

fn signature(palette: Palette, u: f64, v: f64, jg: f64, jb: f64) -> [f64; 4] {
    let r = 0.15 + 0.70 * u;
    let nir = 0.15 + 0.70 * v;
    // B never agrees between palettes (difference bounded away from zero
    // over the whole latent square), so cross-palette evaluation always
    // pays a completion error.
    let (g, b) = match palette {
        Palette::Temperate => (0.18 + 0.50 * u + 0.12 * v, 0.10 + 0.18 * u + 0.08 * v),
        Palette::Arid => (0.52 - 0.15 * u + 0.30 * v, 0.42 - 0.12 * u + 0.28 * v),
    };
    [
        r,
        (g + jg).clamp(0.05, 0.95),
        (b + jb).clamp(0.05, 0.95),
        nir,
    ]
}

/// Apply the mixing map to one optical pixel.
pub fn mix(o: [f64; 4]) -> [f64; 2] {
    let dot = |w: &[f64; 5]| w[0] + w[1] * o[0] + w[2] * o[1] + w[3] * o[2] + w[4] * o[3];
    [dot(&MIX_VV), dot(&MIX_VH)]
}

/// Train/test region layout of a generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSplit {
    /// Left `train_frac` of the width (snapped to the patch grid) trains,
    /// the rest tests.
    VerticalFraction { train_frac: f64 },
    AllTrain,
    AllTest,
}

impl Default for RegionSplit {
    fn default() -> Self {
        RegionSplit::VerticalFraction { train_frac: 0.7 }
    }
}

fn default_texture_amp() -> f64 {
    0.02
}

fn default_name() -> String {
    "scene".to_string()
}

/// Everything needed to regenerate a scene bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_segments: usize,
    pub change_fraction: f64,
    pub speckle_looks: f64,
    #[serde(default)]
    pub palette: Palette,
    #[serde(default)]
    pub split: RegionSplit,
    #[serde(default = "default_texture_amp")]
    pub texture_amp: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments < 2 {
            return Err(validation(format!(
                "n_segments must be at least 2, got {}",
                self.n_segments
            )));
        }
        if !(0.0..=1.0).contains(&self.change_fraction) {
            return Err(validation(format!(
                "change_fraction must be in [0, 1], got {}",
                self.change_fraction
            )));
        }
        if self.speckle_looks < 1.0 {
            return Err(validation(format!(
                "speckle_looks must be at least 1, got {}",
                self.speckle_looks
            )));
        }
        if self.texture_amp < 0.0 || self.texture_amp > 0.1 {
            return Err(validation(format!(
                "texture_amp must be in [0, 0.1], got {}",
                self.texture_amp
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(validation("scene dimensions must be positive"));
        }
        if let RegionSplit::VerticalFraction { train_frac } = self.split {
            if !(0.0..=1.0).contains(&train_frac) {
                return Err(validation(format!(
                    "train_frac must be in [0, 1], got {train_frac}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SceneSpec> {
        let file = File::open(path)
            .map_err(|e| data_err(format!("cannot open scene spec {}: {e}", path.display())))?;
        let spec: SceneSpec = serde_json::from_reader(BufReader::new(file))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Resolved scene: sites, both signature tables, and the change set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub spec: SceneSpec,
    pub sites: Vec<(f64, f64)>,
    pub sig1: Vec<[f64; 4]>,
    pub sig2: Vec<[f64; 4]>,
    pub changed: Vec<bool>,
}

impl SceneModel {
    /// Resolve a spec into segments and signatures (any image size).
    pub fn build(spec: &SceneSpec) -> Result<SceneModel> {
        spec.validate()?;
        let n = spec.n_segments;

        let mut site_rng = derive_rng(spec.seed, "sites", 0);
        let sites: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    site_rng.gen_range(0.0..spec.height as f64),
                    site_rng.gen_range(0.0..spec.width as f64),
                )
            })
            .collect();

        let mut lat_rng = derive_rng(spec.seed, "latents-t1", 0);
        let latents1: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    lat_rng.gen_range(0.0..1.0),
                    lat_rng.gen_range(0.0..1.0),
                    lat_rng.gen_range(-JITTER_AMP..JITTER_AMP),
                    lat_rng.gen_range(-JITTER_AMP..JITTER_AMP),
                )
            })
            .collect();

        let k = (spec.change_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(spec.seed, "change-set", 0));
        let mut changed = vec![false; n];
        for &idx in order.iter().take(k.min(n)) {
            changed[idx] = true;
        }

        let mut redraw_rng = derive_rng(spec.seed, "latents-t2", 0);
        let mut latents2 = latents1.clone();
        for (idx, flag) in changed.iter().enumerate() {
            if !flag {
                continue;
            }
            let (u0, v0, _, _) = latents1[idx];
            let mut tries = 0;
            loop {
                let cand = (
                    redraw_rng.gen_range(0.0..1.0),
                    redraw_rng.gen_range(0.0..1.0),
                    redraw_rng.gen_range(-JITTER_AMP..JITTER_AMP),
                    redraw_rng.gen_range(-JITTER_AMP..JITTER_AMP),
                );
                let dist = ((cand.0 - u0).powi(2) + (cand.1 - v0).powi(2)).sqrt();
                if dist >= MIN_CHANGE_DIST {
                    latents2[idx] = cand;
                    break;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(validation("could not place a changed segment"));
                }
            }
        }

        let palette = spec.palette;
        let sig = |l: &[(f64, f64, f64, f64)]| -> Vec<[f64; 4]> {
            l.iter()
                .map(|&(u, v, jg, jb)| signature(palette, u, v, jg, jb))
                .collect()
        };
        Ok(SceneModel {
            spec: spec.clone(),
            sites,
            sig1: sig(&latents1),
            sig2: sig(&latents2),
            changed,
        })
    }

    /// Nearest-site segment id per pixel, row-major. Ties go to the lowest
    /// site index.
    pub fn segment_map(&self) -> Vec<u32> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut map = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, &(sy, sx)) in self.sites.iter().enumerate() {
                    let d = (py - sy).powi(2) + (px - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                map[y * w + x] = best as u32;
            }
        }
        map
    }

    /// Shared low-amplitude value-noise field in [-1, 1], identical at both
    /// times so unchanged pixels stay bit-identical between O1 and O2.
    pub fn texture_field(&self) -> Vec<f64> {
        let (h, w) = (self.spec.height, self.spec.width);
        let gh = h / TEXTURE_CELL + 2;
        let gw = w / TEXTURE_CELL + 2;
        let mut rng = derive_rng(self.spec.seed, "texture", 0);
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut field = vec![0.0f64; h * w];
        for y in 0..h {
            let fy = y as f64 / TEXTURE_CELL as f64;
            let gy = fy.floor() as usize;
            let ty = fy - gy as f64;
            for x in 0..w {
                let fx = x as f64 / TEXTURE_CELL as f64;
                let gx = fx.floor() as usize;
                let tx = fx - gx as f64;
                let v00 = lattice[gy * gw + gx];
                let v01 = lattice[gy * gw + gx + 1];
                let v10 = lattice[(gy + 1) * gw + gx];
                let v11 = lattice[(gy + 1) * gw + gx + 1];
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                field[y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
        field
    }

    fn signatures(&self, time: Time) -> &[[f64; 4]] {
        match time {
            Time::T1 => &self.sig1,
            Time::T2 => &self.sig2,
        }
    }

    /// Noiseless signature map (no texture) at the given time.
    pub fn ideal_optical(&self, time: Time) -> Raster {
        let (h, w) = (self.spec.height, self.spec.width);
        let segs = self.segment_map();
        let sig = self.signatures(time);
        let mut data = Vec::with_capacity(h * w * 4);
        for &s in &segs {
            for b in 0..4 {
                data.push(sig[s as usize][b] as f32);
            }
        }
        Raster::new(h, w, optical_bands(), ValueDomain::Reflectance01, data)
            .expect("signatures are finite by construction")
    }

    /// Optical image at the given time: signature map plus shared texture.
    pub fn render_optical(&self, time: Time) -> Raster {
        let (h, w) = (self.spec.height, self.spec.width);
        let segs = self.segment_map();
        let texture = self.texture_field();
        let sig = self.signatures(time);
        let amp = self.spec.texture_amp;
        let mut data = Vec::with_capacity(h * w * 4);
        for (i, &s) in segs.iter().enumerate() {
            let t = amp * texture[i];
            for b in 0..4 {
                data.push((sig[s as usize][b] + t).clamp(0.0, 1.0) as f32);
            }
        }
        Raster::new(h, w, optical_bands(), ValueDomain::Reflectance01, data)
            .expect("clamped values are finite")
    }

    /// SAR image: mixing map of the optical image, times gamma speckle with
    /// unit mean. `draw` selects an independent speckle realization; scene
    /// generation uses draw 0.
    pub fn render_sar(&self, time: Time, draw: u64) -> Raster {
        let optical = self.render_optical(time);
        let (h, w) = (self.spec.height, self.spec.width);
        let looks = self.spec.speckle_looks;
        let gamma = Gamma::new(looks, 1.0 / looks).expect("looks >= 1");
        let salt = match time {
            Time::T1 => "speckle-t1",
            Time::T2 => "speckle-t2",
        };
        let mut rng = derive_rng(self.spec.seed, salt, draw);
        let mut data = Vec::with_capacity(h * w * 2);
        for i in 0..h * w {
            let o = [
                optical.data()[i * 4] as f64,
                optical.data()[i * 4 + 1] as f64,
                optical.data()[i * 4 + 2] as f64,
                optical.data()[i * 4 + 3] as f64,
            ];
            let clean = mix(o);
            for &c in &clean {
                data.push((c * gamma.sample(&mut rng)) as f32);
            }
        }
        Raster::new(h, w, sar_bands(), ValueDomain::Raw, data)
            .expect("positive mixing output times gamma is finite")
    }

    /// Train/test rectangles implied by the spec's split.
    pub fn regions(&self) -> (Vec<Rect>, Vec<Rect>) {
        let (h, w) = (self.spec.height, self.spec.width);
        match self.spec.split {
            RegionSplit::AllTrain => (vec![Rect::new(0, 0, h, w)], vec![]),
            RegionSplit::AllTest => (vec![], vec![Rect::new(0, 0, h, w)]),
            RegionSplit::VerticalFraction { train_frac } => {
                let patch = crate::pipeline::PATCH;
                let snapped = ((train_frac * w as f64 / patch as f64).round() as usize * patch)
                    .min(w);
                let mut train = vec![];
                let mut test = vec![];
                if snapped > 0 {
                    train.push(Rect::new(0, 0, h, snapped));
                }
                if snapped < w {
                    test.push(Rect::new(0, snapped, h, w - snapped));
                }
                (train, test)
            }
        }
    }

    /// Render the full quartet. Requires room for at least one patch.
    pub fn quartet(&self) -> Result<SceneQuartet> {
        let patch = crate::pipeline::PATCH;
        if self.spec.height < patch || self.spec.width < patch {
            return Err(validation(format!(
                "degenerate size {}x{}: cannot fit one {patch}x{patch} patch",
                self.spec.height, self.spec.width
            )));
        }
        let (train_region, test_region) = self.regions();
        crate::raster::validate_quartet(
            &self.spec.name,
            self.render_sar(Time::T1, 0),
            self.render_optical(Time::T1),
            self.render_sar(Time::T2, 0),
            self.render_optical(Time::T2),
            train_region,
            test_region,
        )
    }
}

/// Generate the scene quartet for a spec (same spec, same bits).
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneQuartet> {
    SceneModel::build(spec)?.quartet()
}

/// Ground truth for scoring a model against a synthetic scene.
#[derive(Clone, Debug)]
pub struct SceneOracle {
    /// Row-major per-pixel flag: true where the segment changed between
    /// T1 and T2.
    pub change_mask: Vec<bool>,
    /// Noiseless T2 optical image (signature map without texture).
    pub ideal_o2: Raster,
    /// Fraction of pixels whose segment changed.
    pub changed_area_fraction: f64,
}

/// Recompute ground truth for a quartet claimed to come from `spec`.
///
/// The quartet is regenerated from the spec and compared bit-exactly; any
/// mismatch means the quartet is not synthetic (or was edited) and scoring
/// against the oracle would be meaningless.
pub fn scene_oracle(quartet: &SceneQuartet, spec: &SceneSpec) -> Result<SceneOracle> {
    let model = SceneModel::build(spec)?;
    let regen = model.quartet()?;
    let pairs = [
        ("s1", &quartet.s1, &regen.s1),
        ("o1", &quartet.o1, &regen.o1),
        ("s2", &quartet.s2, &regen.s2),
        ("o2", &quartet.o2, &regen.o2),
    ];
    for (label, given, expected) in pairs {
        if given.data() != expected.data()
            || given.bands() != expected.bands()
            || given.height() != expected.height()
            || given.width() != expected.width()
        {
            return Err(validation(format!(
                "quartet raster {label} was not produced by this spec"
            )));
        }
    }
    let segs = model.segment_map();
    let change_mask: Vec<bool> = segs.iter().map(|&s| model.changed[s as usize]).collect();
    let changed_pixels = change_mask.iter().filter(|&&c| c).count();
    Ok(SceneOracle {
        changed_area_fraction: changed_pixels as f64 / change_mask.len() as f64,
        ideal_o2: model.ideal_optical(Time::T2),
        change_mask,
    })
}
