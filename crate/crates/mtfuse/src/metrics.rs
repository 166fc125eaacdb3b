//! PSNR, SSIM, and mean-spectral-angle scoring for reflectance rasters,
//! including the persistence baseline comparison (score the T1 optical
//! image against the T2 reference on the same pixels).
//!
//! All three metrics run in float64 on [0, 1] reflectance with MAX = 1.
//! PSNR and SSIM are computed per band and averaged; MSA treats each
//! pixel's four bands as a spectrum. Region scoring pools statistics over
//! a list of tiles: squared error and spectral angles pool across pixels,
//! SSIM windows stay inside each tile so no window straddles a tile seam.

use crate::error::{data_err, validation, Result};
use crate::raster::{Raster, Rect, ValueDomain};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// Peak signal-to-noise ratio; identical inputs have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// MSE is exactly zero.
    Exact,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Exact => None,
            Psnr::Db(v) => Some(v),
        }
    }

    /// True when `self` is at least as good as `other`.
    pub fn at_least(self, other: Psnr) -> bool {
        match (self, other) {
            (Psnr::Exact, _) => true,
            (Psnr::Db(_), Psnr::Exact) => false,
            (Psnr::Db(a), Psnr::Db(b)) => a >= b,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Exact => write!(f, "exact"),
            Psnr::Db(v) => write!(f, "{v:.2}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Exact => s.serialize_str("exact"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Tag(t) if t == "exact" => Ok(Psnr::Exact),
            Raw::Tag(t) => Err(D::Error::custom(format!("unknown psnr tag {t:?}"))),
        }
    }
}

/// Scores of one method over one pixel population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub psnr_db: Vec<Psnr>,
    pub psnr_mean: Psnr,
    pub ssim: Vec<f64>,
    pub ssim_mean: f64,
    pub msa_radians: f64,
    /// Pixels scored by PSNR/MSA (SSIM sees fewer: window centers only).
    pub pixels: usize,
    /// Zero-norm pixels excluded from the spectral angle mean.
    pub msa_skipped_pixels: usize,
    pub baseline: bool,
}

fn check_pair(a: &Raster, b: &Raster) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(validation(format!(
            "metric inputs differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    for r in [a, b] {
        if r.value_domain() != ValueDomain::Reflectance01 {
            return Err(validation(format!(
                "metrics expect reflectance_01 values, got {:?}",
                r.value_domain()
            )));
        }
    }
    Ok(())
}

// ---- PSNR ----

/// Per-band squared-error sums; pooled across tiles before the log.
#[derive(Clone, Debug, Default)]
struct SseAccum {
    sse: Vec<f64>,
    pixels: usize,
}

impl SseAccum {
    fn add(&mut self, a: &Raster, b: &Raster) {
        let c = a.channels();
        if self.sse.is_empty() {
            self.sse = vec![0.0; c];
        }
        // row-major channel-interleaved layout: flat index % c is the band
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let d = *x as f64 - *y as f64;
            self.sse[i % c] += d * d;
        }
        self.pixels += a.height() * a.width();
    }

    fn finish(&self, max_val: f64) -> (Vec<Psnr>, Psnr) {
        let per_band: Vec<Psnr> = self
            .sse
            .iter()
            .map(|&sse| {
                if sse == 0.0 {
                    Psnr::Exact
                } else {
                    let mse = sse / self.pixels as f64;
                    Psnr::Db(10.0 * (max_val * max_val / mse).log10())
                }
            })
            .collect();
        let finite: Vec<f64> = per_band.iter().filter_map(|p| p.db()).collect();
        // a band with zero error has no finite dB value; the mean covers
        // the remaining bands, and only an all-exact pair reports "exact"
        let mean = if finite.is_empty() {
            Psnr::Exact
        } else {
            Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        (per_band, mean)
    }
}

/// Per-band PSNR in dB plus the band mean, against peak value `max_val`.
pub fn psnr(a: &Raster, b: &Raster, max_val: f64) -> Result<(Vec<Psnr>, Psnr)> {
    check_pair(a, b)?;
    if !(max_val > 0.0) {
        return Err(validation("psnr max_val must be positive"));
    }
    let mut acc = SseAccum::default();
    acc.add(a, b);
    Ok(acc.finish(max_val))
}

// ---- SSIM ----

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-extent separable Gaussian blur: (h, w) -> (h-10, w-10).
fn blur_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * wo];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let out = &mut horiz[y * wo..(y + 1) * wo];
        for (x, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                s += kv * row[x + t];
            }
            *o = s;
        }
    }
    let ho = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                s += kv * horiz[(y + t) * wo + x];
            }
            out[y * wo + x] = s;
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
struct SsimAccum {
    /// Per-band sum of window SSIM values.
    sums: Vec<f64>,
    windows: usize,
}

impl SsimAccum {
    fn add(&mut self, a: &Raster, b: &Raster) -> Result<()> {
        let (h, w, c) = (a.height(), a.width(), a.channels());
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            return Err(validation(format!(
                "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
            )));
        }
        if self.sums.is_empty() {
            self.sums = vec![0.0; c];
        }
        let k = gaussian_kernel();
        let n = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        for ci in 0..c {
            let pa: Vec<f64> = a.band_values(ci).map(|v| v as f64).collect();
            let pb: Vec<f64> = b.band_values(ci).map(|v| v as f64).collect();
            let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
            let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
            let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let mu_a = blur_valid(&pa, h, w, &k);
            let mu_b = blur_valid(&pb, h, w, &k);
            let s_aa = blur_valid(&paa, h, w, &k);
            let s_bb = blur_valid(&pbb, h, w, &k);
            let s_ab = blur_valid(&pab, h, w, &k);
            let mut sum = 0.0;
            for i in 0..n {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = s_aa[i] - ma * ma;
                let vb = s_bb[i] - mb * mb;
                let cov = s_ab[i] - ma * mb;
                sum += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            self.sums[ci] += sum;
        }
        self.windows += n;
        Ok(())
    }

    fn finish(&self) -> (Vec<f64>, f64) {
        let per_band: Vec<f64> = self.sums.iter().map(|s| s / self.windows as f64).collect();
        let mean = per_band.iter().sum::<f64>() / per_band.len() as f64;
        (per_band, mean)
    }
}

/// Per-band mean SSIM over all fully interior 11x11 Gaussian windows,
/// plus the band mean.
pub fn ssim(a: &Raster, b: &Raster) -> Result<(Vec<f64>, f64)> {
    check_pair(a, b)?;
    let mut acc = SsimAccum::default();
    acc.add(a, b)?;
    Ok(acc.finish())
}

// ---- mean spectral angle ----

#[derive(Clone, Debug, Default)]
struct MsaAccum {
    angle_sum: f64,
    valid: usize,
    skipped: usize,
}

impl MsaAccum {
    fn add(&mut self, a: &Raster, b: &Raster) {
        let c = a.channels();
        let da = a.data();
        let db = b.data();
        for px in 0..a.height() * a.width() {
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for ci in 0..c {
                let x = da[px * c + ci] as f64;
                let y = db[px * c + ci] as f64;
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                self.skipped += 1;
                continue;
            }
            let ratio = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
            self.angle_sum += ratio.acos();
            self.valid += 1;
        }
    }

    fn finish(&self) -> Result<(f64, usize, usize)> {
        if self.valid == 0 {
            return Err(data_err("spectral angle undefined: every pixel has a zero-norm spectrum"));
        }
        Ok((self.angle_sum / self.valid as f64, self.valid, self.skipped))
    }
}

/// Mean angle in radians between the per-pixel spectra; zero-norm pixels
/// are skipped. Returns (mean, valid pixels, skipped pixels).
pub fn msa(a: &Raster, b: &Raster) -> Result<(f64, usize, usize)> {
    check_pair(a, b)?;
    if a.channels() != 4 {
        return Err(validation(format!(
            "spectral angle expects 4 bands, got {}",
            a.channels()
        )));
    }
    let mut acc = MsaAccum::default();
    acc.add(a, b);
    acc.finish()
}

// ---- region scoring ----

/// Score one method over the listed tiles (pooled pixels, per-tile SSIM
/// windows).
pub fn score_region(
    method: &str,
    predicted: &Raster,
    reference: &Raster,
    tiles: &[Rect],
    baseline: bool,
) -> Result<MetricsReport> {
    check_pair(predicted, reference)?;
    if predicted.channels() != 4 {
        return Err(validation("region scoring expects 4-band optical rasters"));
    }
    if tiles.is_empty() {
        return Err(data_err("evaluation region is empty"));
    }
    let mut sse = SseAccum::default();
    let mut ssim_acc = SsimAccum::default();
    let mut msa_acc = MsaAccum::default();
    for rect in tiles {
        let pa = predicted.crop(rect.row, rect.col, rect.height, rect.width)?;
        let pb = reference.crop(rect.row, rect.col, rect.height, rect.width)?;
        sse.add(&pa, &pb);
        ssim_acc.add(&pa, &pb)?;
        msa_acc.add(&pa, &pb);
    }
    let (psnr_db, psnr_mean) = sse.finish(1.0);
    let (ssim, ssim_mean) = ssim_acc.finish();
    let (msa_radians, _, msa_skipped_pixels) = msa_acc.finish()?;
    Ok(MetricsReport {
        method: method.to_string(),
        psnr_db,
        psnr_mean,
        ssim,
        ssim_mean,
        msa_radians,
        pixels: sse.pixels,
        msa_skipped_pixels,
        baseline,
    })
}

/// Score a simulated mosaic and the persistence baseline (the T1 optical
/// image) against the T2 reference over the same tiles.
pub fn evaluate(
    method: &str,
    simulated: &Raster,
    reference: &Raster,
    baseline_o1: &Raster,
    tiles: &[Rect],
) -> Result<(MetricsReport, MetricsReport)> {
    let report = score_region(method, simulated, reference, tiles, false)?;
    let base = score_region("O1 baseline", baseline_o1, reference, tiles, true)?;
    Ok((report, base))
}
