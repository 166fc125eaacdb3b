//! Raster data model, the RAS1 on-disk format, and scene-quartet validation.
//!
//! A [`Raster`] is a dense H×W×C float32 grid with band labels. SAR rasters
//! carry two bands (VV, VH), optical rasters four (R, G, B, NIR). Everything
//! downstream (tiling, normalization, training, metrics) works on this one
//! carrier type.
//!
//! The RAS1 container is deliberately minimal so that no geospatial stack is
//! required: a 4-byte magic, a little-endian u32 header length, a UTF-8 JSON
//! header and a raw little-endian float32 payload in row-major,
//! channel-interleaved order.

use crate::error::{format_err, validation, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const RAS1_MAGIC: &[u8; 4] = b"RAS1";

/// Radiometric interpretation of the stored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueDomain {
    /// Surface reflectance scaled to [0, 1] (optical rasters).
    #[serde(rename = "reflectance_01")]
    Reflectance01,
    /// Normalized working range [-1, 1] used by the networks.
    #[serde(rename = "normalized_pm1")]
    NormalizedPm1,
    /// Unconstrained values, e.g. despeckled SAR intensities.
    #[serde(rename = "raw")]
    Raw,
}

#[derive(Serialize, Deserialize)]
struct RasterHeader {
    height: usize,
    width: usize,
    channels: usize,
    bands: Vec<String>,
    value_domain: ValueDomain,
}

/// Dense H×W×C float32 image with band metadata.
///
/// Data is row-major and channel-interleaved: the value of band `c` at pixel
/// `(y, x)` lives at index `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    bands: Vec<String>,
    value_domain: ValueDomain,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        bands: Vec<String>,
        value_domain: ValueDomain,
        data: Vec<f32>,
    ) -> Result<Self> {
        let channels = bands.len();
        let raster = Raster {
            height,
            width,
            channels,
            bands,
            value_domain,
            data,
        };
        raster.check_invariants()?;
        Ok(raster)
    }

    /// All-zero raster with the given shape.
    pub fn zeros(height: usize, width: usize, bands: Vec<String>, value_domain: ValueDomain) -> Self {
        let channels = bands.len();
        Raster {
            height,
            width,
            channels,
            bands,
            value_domain,
            data: vec![0.0; height * width * channels],
        }
    }

    fn check_invariants(&self) -> Result<()> {
        if self.bands.len() != self.channels {
            return Err(validation(format!(
                "band list length {} does not match channel count {}",
                self.bands.len(),
                self.channels
            )));
        }
        let expect = self.height * self.width * self.channels;
        if self.data.len() != expect {
            return Err(validation(format!(
                "payload length mismatch: expected {} values ({}x{}x{}), got {}",
                expect,
                self.height,
                self.width,
                self.channels,
                self.data.len()
            )));
        }
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        if self.value_domain == ValueDomain::NormalizedPm1 {
            if let Some(bad) = self.data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
                return Err(validation(format!(
                    "value_domain normalized_pm1 but value {} at flat index {} is outside [-1, 1]",
                    self.data[bad], bad
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn bands(&self) -> &[String] {
        &self.bands
    }
    pub fn value_domain(&self) -> ValueDomain {
        self.value_domain
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn set_value_domain(&mut self, domain: ValueDomain) {
        self.value_domain = domain;
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Iterator over one band's values in row-major pixel order.
    pub fn band_values(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(c).step_by(self.channels).copied()
    }

    /// Copy of a spatial window as a new raster (same bands/domain).
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        if row + height > self.height || col + width > self.width {
            return Err(validation(format!(
                "crop ({row},{col})+{height}x{width} exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in row..row + height {
            let start = (y * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Raster {
            height,
            width,
            channels: self.channels,
            bands: self.bands.clone(),
            value_domain: self.value_domain,
            data,
        })
    }
}

/// Write a raster to `path` in the RAS1 format.
///
/// The raster invariants are re-checked before anything touches the
/// filesystem, so an invalid raster never produces a partial file.
pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    raster.check_invariants()?;
    let header = RasterHeader {
        height: raster.height,
        width: raster.width,
        channels: raster.channels,
        bands: raster.bands.clone(),
        value_domain: raster.value_domain,
    };
    let header_json = serde_json::to_vec(&header)?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(RAS1_MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    let mut buf = Vec::with_capacity(raster.data.len() * 4);
    for v in &raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read a RAS1 file back into a raster, rejecting malformed containers.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(format!("{}: file too short for RAS1 magic", path.display())))?;
    if &magic != RAS1_MAGIC {
        return Err(format_err(format!(
            "{}: bad magic {:?}, expected \"RAS1\"",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| format_err(format!("{}: truncated header length", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 1 << 20 {
        return Err(format_err(format!(
            "{}: implausible header length {header_len}",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| format_err(format!("{}: truncated header", path.display())))?;
    let header: RasterHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(format!("{}: malformed header: {e}", path.display())))?;
    if header.bands.len() != header.channels {
        return Err(format_err(format!(
            "{}: header lists {} bands but {} channels",
            path.display(),
            header.bands.len(),
            header.channels
        )));
    }

    let expect = header.height * header.width * header.channels;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expect * 4 {
        return Err(format_err(format!(
            "{}: payload length mismatch: expected {} float32 values, found {} bytes",
            path.display(),
            expect,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(expect);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(format!(
            "{}: non-finite value at flat index {bad}",
            path.display()
        )));
    }
    Raster::new(
        header.height,
        header.width,
        header.bands,
        header.value_domain,
        data,
    )
}

/// Axis-aligned pixel rectangle, used for train/test region bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    pub fn contains_tile(&self, row: usize, col: usize, size: usize) -> bool {
        row >= self.row
            && col >= self.col
            && row + size <= self.row + self.height
            && col + size <= self.col + self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.row + self.height <= height && self.col + self.width <= width
    }

    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        y >= self.row && y < self.row + self.height && x >= self.col && x < self.col + self.width
    }
}

/// Co-registered SAR/optical pairs at two acquisition times plus the
/// train/test region split.
#[derive(Clone, Debug)]
pub struct SceneQuartet {
    pub name: String,
    pub s1: Raster,
    pub o1: Raster,
    pub s2: Raster,
    pub o2: Raster,
    pub train_region: Vec<Rect>,
    pub test_region: Vec<Rect>,
}

/// Check co-registration and region consistency and assemble a quartet.
pub fn validate_quartet(
    name: &str,
    s1: Raster,
    o1: Raster,
    s2: Raster,
    o2: Raster,
    train_region: Vec<Rect>,
    test_region: Vec<Rect>,
) -> Result<SceneQuartet> {
    let (h, w) = (s1.height(), s1.width());
    for (label, raster) in [("o1", &o1), ("s2", &s2), ("o2", &o2)] {
        if raster.height() != h || raster.width() != w {
            return Err(validation(format!(
                "co-registration shape mismatch: {label} is {}x{}, s1 is {h}x{w}",
                raster.height(),
                raster.width()
            )));
        }
    }
    for (label, raster) in [("s1", &s1), ("s2", &s2)] {
        if raster.channels() != 2 {
            return Err(validation(format!(
                "SAR raster {label} must have 2 bands, found {}",
                raster.channels()
            )));
        }
    }
    for (label, raster) in [("o1", &o1), ("o2", &o2)] {
        if raster.channels() != 4 {
            return Err(validation(format!(
                "optical raster {label} must have 4 bands, found {}",
                raster.channels()
            )));
        }
    }
    for (label, rects) in [("train", &train_region), ("test", &test_region)] {
        for rect in rects {
            if !rect.within(h, w) {
                return Err(validation(format!(
                    "{label} region {rect:?} exceeds image bounds {h}x{w}"
                )));
            }
        }
    }
    for tr in &train_region {
        for te in &test_region {
            if tr.intersects(te) {
                return Err(validation(format!(
                    "overlapping train/test regions: {tr:?} and {te:?}"
                )));
            }
        }
    }
    Ok(SceneQuartet {
        name: name.to_string(),
        s1,
        o1,
        s2,
        o2,
        train_region,
        test_region,
    })
}

pub fn sar_bands() -> Vec<String> {
    vec!["VV".to_string(), "VH".to_string()]
}

pub fn optical_bands() -> Vec<String> {
    vec![
        "R".to_string(),
        "G".to_string(),
        "B".to_string(),
        "NIR".to_string(),
    ]
}
