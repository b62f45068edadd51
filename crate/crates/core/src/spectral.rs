//! Multispectral patches, the NDMI band, and the `.json` + `.bin` raster
//! file pair.
//!
//! A raster file pair is a JSON header next to a little-endian payload with
//! the same stem:
//!
//! ```text
//! scene.json  {"magic":"PLMPATCH1","channels":12,"height":128,"width":128,
//!              "dtype":"f64","order":"CHW","band_names":[...],"resolution_m":20}
//! scene.bin   C·H·W little-endian f64 values, channel-major
//! ```
//!
//! Masks use magic `PLMMASK1`, dtype `u8` and one byte per pixel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATCH_MAGIC: &str = "PLMPATCH1";
pub const MASK_MAGIC: &str = "PLMMASK1";

/// Sentinel-2 L2A band order used for every 12-band patch.
pub const SENTINEL2_BANDS: [&str; 12] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12",
];
pub const NDMI_BAND: &str = "NDMI";

/// `B11 + B12` at or below this yields NDMI 0.
pub const DENOM_FLOOR: f64 = 1e-9;

pub const DEFAULT_RESOLUTION_M: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    pub lat: f64,
    pub lon: f64,
    /// UTC, ISO-8601.
    pub timestamp: String,
}

/// Header of a raster file pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub magic: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub order: String,
    pub band_names: Vec<String>,
    pub resolution_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_id: Option<String>,
}

/// A single H×W float plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Write as a one-channel raster file pair.
    pub fn save(&self, path: &Path, band_name: &str, resolution_m: f64) -> Result<()> {
        let header = RasterHeader {
            magic: PATCH_MAGIC.into(),
            channels: 1,
            height: self.height,
            width: self.width,
            dtype: "f64".into(),
            order: "CHW".into(),
            band_names: vec![band_name.into()],
            resolution_m,
            geo: None,
            patch_id: None,
        };
        write_f64_raster(path, &header, &self.data)
    }
}

/// C×H×W reflectance raster with 12 Sentinel-2 bands and optionally NDMI
/// as the 13th.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralPatch {
    height: usize,
    width: usize,
    band_names: Vec<String>,
    data: Vec<f64>,
    pub resolution_m: f64,
    pub geo: Option<GeoTag>,
}

impl MultispectralPatch {
    pub fn new(
        band_names: Vec<String>,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        const OP: &str = "patch";
        let c = band_names.len();
        if c != 12 && c != 13 {
            return Err(Error::invalid(OP, format!("expected 12 or 13 bands, got {c}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid(OP, "empty raster"));
        }
        if data.len() != c * height * width {
            return Err(Error::shape(
                OP,
                "data length",
                format!("{} values for {c}×{height}×{width}", data.len()),
            ));
        }
        for (i, expected) in SENTINEL2_BANDS.iter().enumerate() {
            if band_names[i] != *expected {
                return Err(Error::invalid(
                    OP,
                    format!("band {i} must be {expected}, got {}", band_names[i]),
                ));
            }
        }
        if c == 13 && band_names[12] != NDMI_BAND {
            return Err(Error::invalid(
                OP,
                format!("13th band must be {NDMI_BAND}, got {}", band_names[12]),
            ));
        }
        Ok(Self {
            height,
            width,
            band_names,
            data,
            resolution_m: DEFAULT_RESOLUTION_M,
            geo: None,
        })
    }

    /// A 12-band patch in canonical order.
    pub fn from_bands(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(
            SENTINEL2_BANDS.iter().map(|s| s.to_string()).collect(),
            height,
            width,
            data,
        )
    }

    pub fn channels(&self) -> usize {
        self.band_names.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn has_ndmi(&self) -> bool {
        self.channels() == 13
    }

    pub fn band_index(&self, name: &str) -> Result<usize> {
        self.band_names
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| Error::MissingBand(name.to_string()))
    }

    pub fn band(&self, name: &str) -> Result<&[f64]> {
        let i = self.band_index(name)?;
        Ok(self.plane(i))
    }

    pub fn plane(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// The 12 spectral bands, dropping NDMI if present.
    pub fn spectral_only(&self) -> MultispectralPatch {
        if !self.has_ndmi() {
            return self.clone();
        }
        let n = self.height * self.width;
        MultispectralPatch {
            height: self.height,
            width: self.width,
            band_names: self.band_names[..12].to_vec(),
            data: self.data[..12 * n].to_vec(),
            resolution_m: self.resolution_m,
            geo: self.geo.clone(),
        }
    }

    pub fn header(&self) -> RasterHeader {
        RasterHeader {
            magic: PATCH_MAGIC.into(),
            channels: self.channels(),
            height: self.height,
            width: self.width,
            dtype: "f64".into(),
            order: "CHW".into(),
            band_names: self.band_names.clone(),
            resolution_m: self.resolution_m,
            geo: self.geo.clone(),
            patch_id: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_f64_raster(path, &self.header(), &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = read_f64_raster(path)?;
        let mut patch = Self::new(header.band_names, header.height, header.width, data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        patch.resolution_m = header.resolution_m;
        patch.geo = header.geo;
        Ok(patch)
    }
}

/// Per-pixel `(B12 − B11)/(B12 + B11)`, zero where the denominator is at or
/// below [`DENOM_FLOOR`].
pub fn compute_ndmi(patch: &MultispectralPatch) -> Result<Plane> {
    let b11 = patch.band("B11")?;
    let b12 = patch.band("B12")?;
    let data = b11
        .iter()
        .zip(b12)
        .map(|(&r11, &r12)| ndmi_value(r11, r12))
        .collect();
    Ok(Plane {
        height: patch.height,
        width: patch.width,
        data,
    })
}

pub fn ndmi_value(b11: f64, b12: f64) -> f64 {
    let denom = b12 + b11;
    if denom <= DENOM_FLOOR {
        0.0
    } else {
        (b12 - b11) / denom
    }
}

/// Append NDMI as the 13th band.
pub fn stack_ndmi(patch: &MultispectralPatch) -> Result<MultispectralPatch> {
    if patch.channels() != 12 {
        return Err(Error::AlreadyStacked);
    }
    let ndmi = compute_ndmi(patch)?;
    let mut out = patch.clone();
    out.band_names.push(NDMI_BAND.into());
    out.data.extend_from_slice(&ndmi.data);
    Ok(out)
}

/// Binary H×W plume mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlumeMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
    pub patch_id: Option<String>,
}

impl PlumeMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
            patch_id: None,
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "mask",
                "data length",
                format!("{} values for {height}×{width}", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
            patch_id: None,
        })
    }

    /// Threshold a probability plane: positive where `p > threshold`.
    pub fn from_threshold(height: usize, width: usize, probs: &[f64], threshold: f64) -> Self {
        Self {
            height,
            width,
            values: probs.iter().map(|&p| p > threshold).collect(),
            patch_id: None,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn positive_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = RasterHeader {
            magic: MASK_MAGIC.into(),
            channels: 1,
            height: self.height,
            width: self.width,
            dtype: "u8".into(),
            order: "CHW".into(),
            band_names: vec!["MASK".into()],
            resolution_m: DEFAULT_RESOLUTION_M,
            geo: None,
            patch_id: self.patch_id.clone(),
        };
        let payload: Vec<u8> = self.values.iter().map(|&v| v as u8).collect();
        write_pair(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header = read_header(path)?;
        validate_header(path, &header, MASK_MAGIC, "u8")?;
        if header.channels != 1 {
            return Err(Error::format(path, "mask must have exactly one channel"));
        }
        let bin = payload_path(path);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != header.height * header.width {
            return Err(Error::format(
                &bin,
                format!(
                    "payload length mismatch: expected {} bytes, found {}",
                    header.height * header.width,
                    bytes.len()
                ),
            ));
        }
        let values = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(&bin, format!("mask value {other} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: header.height,
            width: header.width,
            values,
            patch_id: header.patch_id,
        })
    }
}

/// `scene.json` → `scene.bin`.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// `scene` or `scene.json` → `scene.json`.
pub fn header_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

pub fn read_header(path: &Path) -> Result<RasterHeader> {
    let path = header_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn validate_header(path: &Path, h: &RasterHeader, magic: &str, dtype: &str) -> Result<()> {
    if h.magic != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {magic:?}", h.magic),
        ));
    }
    if h.dtype != dtype {
        return Err(Error::format(path, format!("unknown dtype {:?}", h.dtype)));
    }
    if h.order != "CHW" {
        return Err(Error::format(path, format!("unsupported order {:?}", h.order)));
    }
    if h.band_names.len() != h.channels {
        return Err(Error::format(
            path,
            format!(
                "header declares {} channels but lists {} band names",
                h.channels,
                h.band_names.len()
            ),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = h.band_names.iter().find(|b| !seen.insert(b.as_str())) {
        return Err(Error::format(path, format!("duplicate band name {dup}")));
    }
    if h.height == 0 || h.width == 0 || h.channels == 0 {
        return Err(Error::format(path, "zero extent"));
    }
    Ok(())
}

/// Read any f64 raster file pair regardless of channel count.
pub fn read_f64_raster(path: &Path) -> Result<(RasterHeader, Vec<f64>)> {
    let path = header_path(path);
    let header = read_header(&path)?;
    validate_header(&path, &header, PATCH_MAGIC, "f64")?;
    let bin = payload_path(&path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = header.channels * header.height * header.width * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            &bin,
            format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, data))
}

pub fn write_f64_raster(path: &Path, header: &RasterHeader, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), header.channels * header.height * header.width);
    let mut payload = Vec::with_capacity(data.len() * 8);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(path, header, &payload)
}

fn write_pair(path: &Path, header: &RasterHeader, payload: &[u8]) -> Result<()> {
    let path = header_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(header).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let bin = payload_path(&path);
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}
