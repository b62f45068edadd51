//! Corpus handling: manifests, normalization statistics, cropping,
//! augmentation, per-epoch negative sampling and the synthetic scene
//! generator.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mbmp::PassPair;
use crate::spectral::{
    compute_ndmi, stack_ndmi, GeoTag, MultispectralPatch, PlumeMask, NDMI_BAND, SENTINEL2_BANDS,
};

pub const PATCH_SIZE: usize = 128;
pub const CROP_RETRIES: usize = 16;

/// SplitMix64 finalizer folded over `parts`; used to derive independent
/// per-(seed, epoch, index) RNG streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Plume,
    NoPlume,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub patch_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Plume-free pass of the same footprint, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_path: Option<String>,
    pub label: Label,
    pub split: Split,
}

/// Per-band z-score statistics from the training split. Always covers the
/// 12 spectral bands followed by NDMI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub band_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        let mut names: Vec<String> = SENTINEL2_BANDS.iter().map(|s| s.to_string()).collect();
        names.push(NDMI_BAND.into());
        Self {
            band_names: names,
            mean: vec![0.0; 13],
            std: vec![1.0; 13],
        }
    }

    /// Accumulate over full 13-band patches (spectral bands plus NDMI).
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a MultispectralPatch>) -> Result<Self> {
        let mut sum = [0.0f64; 13];
        let mut count = 0usize;
        let mut stacked = Vec::new();
        for p in patches {
            let s = if p.has_ndmi() { p.clone() } else { stack_ndmi(p)? };
            let n = s.height() * s.width();
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += s.plane(c).iter().sum::<f64>();
            }
            count += n;
            stacked.push(s);
        }
        if count == 0 {
            return Err(Error::invalid("normalization", "no training patches"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = [0.0f64; 13];
        for s in &stacked {
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += s.plane(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            band_names: stacked[0].band_names().to_vec(),
            mean,
            std,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub normalization: Option<NormalizationStats>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const NORMALIZATION_FILE: &str = "normalization.json";

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            entries,
            normalization: None,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.patch_path.as_str()) {
                return Err(Error::invalid(
                    "manifest",
                    format!("patch {} listed more than once", e.patch_path),
                ));
            }
        }
        Ok(())
    }

    /// Load `manifest.jsonl` (and `normalization.json` if present) from a
    /// corpus directory or an explicit manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::json(&file, e))?);
        }
        let mut m = Self::new(root.clone(), entries)?;
        let norm = root.join(NORMALIZATION_FILE);
        if norm.exists() {
            m.normalization = Some(NormalizationStats::load(&norm)?);
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        let mut out = fs::File::create(&file).map_err(|e| Error::io(&file, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|err| Error::json(&file, err))?;
            writeln!(out, "{line}").map_err(|err| Error::io(&file, err))?;
        }
        if let Some(n) = &self.normalization {
            n.save(&self.root.join(NORMALIZATION_FILE))?;
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    pub fn load_patch(&self, i: usize) -> Result<MultispectralPatch> {
        MultispectralPatch::load(&self.resolve(&self.entries[i].patch_path))
    }

    /// Ground-truth mask, or an empty one for `no_plume` entries without a
    /// mask file.
    pub fn load_mask(&self, i: usize, height: usize, width: usize) -> Result<PlumeMask> {
        let e = &self.entries[i];
        let mask = match &e.mask_path {
            Some(p) => PlumeMask::load(&self.resolve(p))?,
            None => PlumeMask::empty(height, width),
        };
        let positives = mask.positive_count();
        match e.label {
            Label::Plume if positives == 0 => Err(Error::invalid(
                "manifest",
                format!("plume entry {} has an empty mask", e.id),
            )),
            Label::NoPlume if positives > 0 => Err(Error::invalid(
                "manifest",
                format!("no_plume entry {} has {positives} positive pixels", e.id),
            )),
            _ => Ok(mask),
        }
    }

    pub fn load_ref(&self, i: usize) -> Result<Option<MultispectralPatch>> {
        self.entries[i]
            .ref_path
            .as_ref()
            .map(|p| MultispectralPatch::load(&self.resolve(p)))
            .transpose()
    }

    /// Compute and attach train-split statistics.
    pub fn compute_normalization(&mut self) -> Result<&NormalizationStats> {
        let patches = self
            .split_indices(Split::Train)
            .into_iter()
            .map(|i| self.load_patch(i))
            .collect::<Result<Vec<_>>>()?;
        self.normalization = Some(NormalizationStats::from_patches(&patches)?);
        Ok(self.normalization.as_ref().expect("just set"))
    }
}

/// A scene held in memory: its 12 spectral bands and truth mask.
#[derive(Clone, Debug)]
pub struct Scene {
    pub index: usize,
    pub id: String,
    pub label: Label,
    pub patch: MultispectralPatch,
    pub mask: PlumeMask,
}

pub fn load_scenes(manifest: &DatasetManifest, split: Split) -> Result<Vec<Scene>> {
    manifest
        .split_indices(split)
        .into_iter()
        .map(|i| {
            let patch = manifest.load_patch(i)?.spectral_only();
            let mask = manifest.load_mask(i, patch.height(), patch.width())?;
            Ok(Scene {
                index: i,
                id: manifest.entries[i].id.clone(),
                label: manifest.entries[i].label,
                patch,
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

fn crop_at(
    patch: &MultispectralPatch,
    mask: &PlumeMask,
    oy: usize,
    ox: usize,
    size: usize,
) -> Result<(MultispectralPatch, PlumeMask)> {
    let (h, w) = (patch.height(), patch.width());
    let mut data = Vec::with_capacity(patch.channels() * size * size);
    for c in 0..patch.channels() {
        let plane = patch.plane(c);
        for y in oy..oy + size {
            data.extend_from_slice(&plane[y * w + ox..y * w + ox + size]);
        }
    }
    let mut values = Vec::with_capacity(size * size);
    for y in oy..oy + size {
        values.extend_from_slice(&mask.values[y * w + ox..y * w + ox + size]);
    }
    debug_assert_eq!(mask.height, h);
    let mut out = MultispectralPatch::new(patch.band_names().to_vec(), size, size, data)?;
    out.resolution_m = patch.resolution_m;
    out.geo = patch.geo.clone();
    let mut m = PlumeMask::from_values(size, size, values)?;
    m.patch_id = mask.patch_id.clone();
    Ok((out, m))
}

/// Aligned crop of patch and mask. Random crops that lose every positive
/// pixel of a plume scene are redrawn up to [`CROP_RETRIES`] times, then
/// replaced by a crop centred on the first positive pixel.
pub fn crop(
    patch: &MultispectralPatch,
    mask: &PlumeMask,
    mode: CropMode,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(MultispectralPatch, PlumeMask)> {
    let (h, w) = (patch.height(), patch.width());
    if h < size || w < size {
        return Err(Error::invalid(
            "crop",
            format!("source {h}×{w} smaller than crop {size}"),
        ));
    }
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::shape(
            "crop",
            "mask",
            format!("mask {}×{} vs patch {h}×{w}", mask.height, mask.width),
        ));
    }
    match mode {
        CropMode::Center => crop_at(patch, mask, (h - size) / 2, (w - size) / 2, size),
        CropMode::Random => {
            let has_plume = mask.positive_count() > 0;
            for _ in 0..=CROP_RETRIES {
                let oy = rng.gen_range(0..=h - size);
                let ox = rng.gen_range(0..=w - size);
                let out = crop_at(patch, mask, oy, ox, size)?;
                if !has_plume || out.1.positive_count() > 0 {
                    return Ok(out);
                }
            }
            let first = mask.values.iter().position(|&v| v).expect("has plume");
            let (py, px) = (first / w, first % w);
            let oy = py.saturating_sub(size / 2).min(h - size);
            let ox = px.saturating_sub(size / 2).min(w - size);
            crop_at(patch, mask, oy, ox, size)
        }
    }
}

fn rotate_plane<T: Copy>(src: &[T], n: usize, quarter_turns: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for _ in 0..quarter_turns % 4 {
        let prev = out.clone();
        // Counter-clockwise: new[y][x] = old[x][n−1−y]
        for y in 0..n {
            for x in 0..n {
                out[y * n + x] = prev[x * n + (n - 1 - y)];
            }
        }
    }
    out
}

/// Rotate a square patch and its mask by `quarter_turns · 90°`.
pub fn rotate(
    patch: &MultispectralPatch,
    mask: &PlumeMask,
    quarter_turns: usize,
) -> Result<(MultispectralPatch, PlumeMask)> {
    let n = patch.height();
    if patch.width() != n {
        return Err(Error::invalid("rotate", "patch must be square"));
    }
    let mut data = Vec::with_capacity(patch.data().len());
    for c in 0..patch.channels() {
        data.extend(rotate_plane(patch.plane(c), n, quarter_turns));
    }
    let mut out = MultispectralPatch::new(patch.band_names().to_vec(), n, n, data)?;
    out.resolution_m = patch.resolution_m;
    out.geo = patch.geo.clone();
    let mut m = PlumeMask::from_values(n, n, rotate_plane(&mask.values, n, quarter_turns))?;
    m.patch_id = mask.patch_id.clone();
    Ok((out, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Noise σ per band as a fraction of that band's training std.
    pub noise_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            noise_frac: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate: false,
            noise_frac: 0.0,
        }
    }
}

/// Random right-angle rotation plus Gaussian band noise. The mask is only
/// rotated; an NDMI band, if present, is recomputed from the noisy bands.
pub fn augment(
    patch: &MultispectralPatch,
    mask: &PlumeMask,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    stats: &NormalizationStats,
) -> Result<(MultispectralPatch, PlumeMask)> {
    if patch.height() != patch.width() {
        return Err(Error::invalid("augment", "patch must be square"));
    }
    let turns = if cfg.rotate { rng.gen_range(0..4) } else { 0 };
    let (rotated, mask) = rotate(&patch.spectral_only(), mask, turns)?;
    let mut noisy = rotated;
    if cfg.noise_frac > 0.0 {
        for c in 0..12 {
            let sigma = cfg.noise_frac * stats.std[c];
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::invalid("augment", e.to_string()))?;
            for v in noisy.plane_mut(c) {
                *v += normal.sample(rng);
            }
        }
    }
    let out = if patch.has_ndmi() {
        stack_ndmi(&noisy)?
    } else {
        noisy
    };
    Ok((out, mask))
}

/// Entry ids for one epoch and whether negatives had to be drawn with
/// replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochSample {
    pub ids: Vec<usize>,
    pub with_replacement: bool,
}

/// All positives of `split` plus `neg_ratio` negatives per positive, shuffled.
/// Deterministic in `(seed, epoch)`.
pub fn epoch_sampler(
    manifest: &DatasetManifest,
    split: Split,
    neg_ratio: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochSample> {
    let idx = manifest.split_indices(split);
    if idx.is_empty() {
        return Err(Error::invalid("epoch_sampler", format!("split {split:?} is empty")));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| manifest.entries[i].label == Label::Plume);
    if pos.is_empty() {
        return Err(Error::invalid(
            "epoch_sampler",
            format!("split {split:?} has no positive entries"),
        ));
    }
    let mut rng = rng_for(&[seed, epoch as u64, 0x5a4d]);
    let want = neg_ratio * pos.len();
    let mut with_replacement = false;
    let negatives: Vec<usize> = if neg.is_empty() || want == 0 {
        Vec::new()
    } else if want <= neg.len() {
        neg.choose_multiple(&mut rng, want).copied().collect()
    } else {
        with_replacement = true;
        (0..want).map(|_| neg[rng.gen_range(0..neg.len())]).collect()
    };
    let mut ids = pos;
    ids.extend(negatives);
    ids.shuffle(&mut rng);
    Ok(EpochSample {
        ids,
        with_replacement,
    })
}

/// Network input for a 12- or 13-band patch: spectral bands (and NDMI when
/// `use_ndmi`) z-scored with `stats`. NDMI is computed from raw reflectance.
pub fn model_input(
    patch: &MultispectralPatch,
    use_ndmi: bool,
    stats: &NormalizationStats,
) -> Result<Vec<f64>> {
    let spectral = patch.spectral_only();
    let n = spectral.height() * spectral.width();
    let channels = if use_ndmi { 13 } else { 12 };
    let mut out = Vec::with_capacity(channels * n);
    for c in 0..12 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.extend(spectral.plane(c).iter().map(|v| (v - m) / s));
    }
    if use_ndmi {
        let ndmi = compute_ndmi(&spectral)?;
        let (m, s) = (stats.mean[12], stats.std[12]);
        out.extend(ndmi.data.iter().map(|v| (v - m) / s));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlumeProfile {
    /// Absorption follows the Gaussian itself.
    #[default]
    Gaussian,
    /// Uniform absorption over the masked footprint.
    TopHat,
}

impl std::str::FromStr for PlumeProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(PlumeProfile::Gaussian),
            "top_hat" | "top-hat" => Ok(PlumeProfile::TopHat),
            other => Err(format!("unknown plume profile {other:?} (gaussian|top-hat)")),
        }
    }
}

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Base reflectance per band in Sentinel-2 order.
    pub base_reflectance: Vec<f64>,
    /// Std of the per-pixel Gaussian noise (reflectance units), clipped at ±3σ.
    pub noise_level: f64,
    /// Peak amplitude of a smooth multiplicative albedo field shared by all bands.
    pub terrain_amplitude: f64,
    /// Peak fractional B12 absorption in `[0, 1)`.
    pub amplitude: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Plume centre `(row, col)`; random when absent.
    pub center: Option<(f64, f64)>,
    pub profile: PlumeProfile,
    /// Mask is `G > mask_cutoff`.
    pub mask_cutoff: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: PATCH_SIZE,
            width: PATCH_SIZE,
            base_reflectance: vec![
                0.08, 0.10, 0.13, 0.16, 0.20, 0.24, 0.26, 0.28, 0.29, 0.30, 0.32, 0.26,
            ],
            noise_level: 0.004,
            terrain_amplitude: 0.15,
            amplitude: 0.1,
            sigma_x: 8.0,
            sigma_y: 8.0,
            center: None,
            profile: PlumeProfile::Gaussian,
            mask_cutoff: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "synth";
        if !(0.0..1.0).contains(&self.amplitude) {
            return Err(Error::invalid(OP, "amplitude must lie in [0, 1)"));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::invalid(OP, "plume sigmas must be positive"));
        }
        if self.base_reflectance.len() != 12 {
            return Err(Error::invalid(OP, "need 12 base reflectances"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid(OP, "empty scene"));
        }
        if !(self.noise_level >= 0.0) || !(self.terrain_amplitude >= 0.0) {
            return Err(Error::invalid(OP, "noise and terrain levels must be non-negative"));
        }
        Ok(())
    }

    /// Unit-peak anisotropic Gaussian at pixel `(y, x)`.
    pub fn plume_weight(&self, center: (f64, f64), y: usize, x: usize) -> f64 {
        let dy = y as f64 - center.0;
        let dx = x as f64 - center.1;
        (-(dx * dx / (2.0 * self.sigma_x * self.sigma_x)
            + dy * dy / (2.0 * self.sigma_y * self.sigma_y)))
            .exp()
    }
}

/// A generated scene: plume pass, truth mask, and the pass pair whose
/// reference is the same background without the plume.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub patch: MultispectralPatch,
    pub mask: PlumeMask,
    pub pair: PassPair,
    pub center: (f64, f64),
}

pub fn synth_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut rng = rng_for(&[cfg.seed, 0x53594e]);

    // Smooth albedo field: a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let weight_sum: f64 = waves.iter().map(|w| w.0).sum::<f64>().max(1e-12);
    let terrain: Vec<f64> = (0..n)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let s: f64 = waves
                .iter()
                .map(|&(a, fy, fx, ph)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                .sum();
            1.0 + cfg.terrain_amplitude * s / weight_sum
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut background = Vec::with_capacity(12 * n);
    for &base in &cfg.base_reflectance {
        for &t in &terrain {
            let z: f64 = noise.sample(&mut rng);
            let v = base * t + cfg.noise_level * z.clamp(-3.0, 3.0);
            background.push(v.max(0.0));
        }
    }

    let center = match cfg.center {
        Some(c) => c,
        None => {
            let margin_y = (2.0 * cfg.sigma_y).min(h as f64 / 2.0);
            let margin_x = (2.0 * cfg.sigma_x).min(w as f64 / 2.0);
            (
                rng.gen_range(margin_y..=(h as f64 - 1.0 - margin_y).max(margin_y)),
                rng.gen_range(margin_x..=(w as f64 - 1.0 - margin_x).max(margin_x)),
            )
        }
    };
    let mut plume = background.clone();
    let mut mask = PlumeMask::empty(h, w);
    if cfg.amplitude > 0.0 {
        let b12 = &mut plume[11 * n..12 * n];
        for y in 0..h {
            for x in 0..w {
                let g = cfg.plume_weight(center, y, x);
                let inside = g > cfg.mask_cutoff;
                mask.values[y * w + x] = inside;
                let absorb = match cfg.profile {
                    PlumeProfile::Gaussian => cfg.amplitude * g,
                    PlumeProfile::TopHat if inside => cfg.amplitude,
                    PlumeProfile::TopHat => 0.0,
                };
                b12[y * w + x] *= 1.0 - absorb;
            }
        }
    }

    let mut plume_pass = MultispectralPatch::from_bands(h, w, plume)?;
    let mut ref_pass = MultispectralPatch::from_bands(h, w, background)?;
    plume_pass.geo = Some(GeoTag {
        lat: 0.0,
        lon: 0.0,
        timestamp: "2024-01-02T10:00:00Z".into(),
    });
    ref_pass.geo = Some(GeoTag {
        lat: 0.0,
        lon: 0.0,
        timestamp: "2024-01-01T10:00:00Z".into(),
    });
    let pair = PassPair::new(plume_pass.clone(), ref_pass)?;
    Ok(SynthScene {
        patch: plume_pass,
        mask,
        pair,
        center,
    })
}

/// Options for generating a whole corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scenes: usize,
    /// Fraction of scenes without a plume.
    pub negative_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Put every scene in the training split.
    pub all_train: bool,
    pub sigma_range: (f64, f64),
    pub scene: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            negative_fraction: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            all_train: false,
            sigma_range: (5.0, 10.0),
            scene: SynthConfig::default(),
        }
    }
}

fn assign_splits(count: usize, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<Split> {
    if cfg.all_train {
        return vec![Split::Train; count];
    }
    let n_val = (count as f64 * cfg.val_fraction).round() as usize;
    let n_test = (count as f64 * cfg.test_fraction).round() as usize;
    let mut splits: Vec<Split> = (0..count)
        .map(|i| {
            if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    splits.shuffle(rng);
    splits
}

/// Write a synthetic corpus (patches, masks, reference passes, manifest and
/// train-split normalization) under `dir`. Splits are stratified by label.
pub fn write_synthetic_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<DatasetManifest> {
    if cfg.scenes == 0 {
        return Err(Error::invalid("synth", "need at least one scene"));
    }
    cfg.scene.validate()?;
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let mut rng = rng_for(&[cfg.scene.seed, 0xC0]);
    let n_neg = (cfg.scenes as f64 * cfg.negative_fraction).round() as usize;
    let n_pos = cfg.scenes - n_neg.min(cfg.scenes);
    let mut labels: Vec<Label> = (0..cfg.scenes)
        .map(|i| if i < n_pos { Label::Plume } else { Label::NoPlume })
        .collect();
    labels.shuffle(&mut rng);
    let pos_splits = assign_splits(n_pos, cfg, &mut rng);
    let neg_splits = assign_splits(cfg.scenes - n_pos, cfg, &mut rng);
    let (mut pi, mut ni) = (0, 0);

    let mut entries = Vec::with_capacity(cfg.scenes);
    for (i, &label) in labels.iter().enumerate() {
        let split = match label {
            Label::Plume => {
                pi += 1;
                pos_splits[pi - 1]
            }
            Label::NoPlume => {
                ni += 1;
                neg_splits[ni - 1]
            }
        };
        let mut sc = cfg.scene.clone();
        sc.seed = derive_seed(&[cfg.scene.seed, i as u64]);
        let (lo, hi) = cfg.sigma_range;
        if hi > lo {
            sc.sigma_x = rng.gen_range(lo..hi);
            sc.sigma_y = rng.gen_range(lo..hi);
        }
        if label == Label::NoPlume {
            sc.amplitude = 0.0;
        }
        let scene = synth_scene(&sc)?;
        let id = format!("scene_{i:04}");
        let patch_rel = format!("scenes/{id}.json");
        scene.patch.save(&dir.join(&patch_rel))?;
        let mask_rel = match label {
            Label::Plume => {
                let rel = format!("scenes/{id}.mask.json");
                let mut m = scene.mask.clone();
                m.patch_id = Some(id.clone());
                m.save(&dir.join(&rel))?;
                Some(rel)
            }
            Label::NoPlume => None,
        };
        let ref_rel = format!("scenes/{id}.ref.json");
        scene.pair.ref_pass.save(&dir.join(&ref_rel))?;
        entries.push(ManifestEntry {
            id,
            patch_path: patch_rel,
            mask_path: mask_rel,
            ref_path: Some(ref_rel),
            label,
            split,
        });
    }
    let mut manifest = DatasetManifest::new(dir, entries)?;
    if manifest.split_indices(Split::Train).is_empty() {
        manifest.normalization = Some(NormalizationStats::identity());
    } else {
        manifest.compute_normalization()?;
    }
    manifest.save()?;
    Ok(manifest)
}
