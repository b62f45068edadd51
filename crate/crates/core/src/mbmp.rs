//! Multi-band multi-pass (MBMP) retrieval baseline.
//!
//! The single-pass term compares B12 to B11 after fitting a scene-wide
//! scale `c` by least squares (`c·B12 ≈ B11`):
//!
//! ```text
//! c      = Σ B11·B12 / Σ B12²
//! ΔR_MB  = c·B12/B11 − 1
//! ΔR_MBMP = ΔR_MB(plume pass) − ΔR_MB(reference pass)
//! ```
//!
//! Methane absorbs in B12, so plume pixels come out negative.

use crate::error::{Error, Result};
use crate::spectral::{MultispectralPatch, Plane, PlumeMask, DENOM_FLOOR};

pub const DEFAULT_THRESHOLD: f64 = -0.05;

/// A plume pass and a plume-free reference pass over the same footprint.
#[derive(Clone, Debug)]
pub struct PassPair {
    pub plume_pass: MultispectralPatch,
    pub ref_pass: MultispectralPatch,
}

impl PassPair {
    pub fn new(plume_pass: MultispectralPatch, ref_pass: MultispectralPatch) -> Result<Self> {
        const OP: &str = "pass_pair";
        if (plume_pass.height(), plume_pass.width()) != (ref_pass.height(), ref_pass.width()) {
            return Err(Error::shape(
                OP,
                "extent",
                format!(
                    "{}×{} vs {}×{}",
                    plume_pass.height(),
                    plume_pass.width(),
                    ref_pass.height(),
                    ref_pass.width()
                ),
            ));
        }
        if plume_pass.band_names() != ref_pass.band_names() {
            return Err(Error::invalid(OP, "passes carry different band sets"));
        }
        if let (Some(a), Some(b)) = (&plume_pass.geo, &ref_pass.geo) {
            if a.timestamp == b.timestamp {
                return Err(Error::invalid(OP, "passes share a timestamp"));
            }
        }
        Ok(Self {
            plume_pass,
            ref_pass,
        })
    }

    /// The same pair with the passes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            plume_pass: self.ref_pass.clone(),
            ref_pass: self.plume_pass.clone(),
        }
    }
}

/// A retrieval plane plus the pixels where it is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub plane: Plane,
    pub valid: Vec<bool>,
}

/// Least-squares scale `c` with `c·B12 ≈ B11` over valid pixels.
pub fn fit_scale(b11: &[f64], b12: &[f64], valid: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..b11.len() {
        if valid[i] {
            num += b11[i] * b12[i];
            den += b12[i] * b12[i];
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn single_pass_mb(patch: &MultispectralPatch) -> Result<Retrieval> {
    let b11 = patch.band("B11")?;
    let b12 = patch.band("B12")?;
    let valid: Vec<bool> = b11.iter().map(|&v| v > DENOM_FLOOR).collect();
    let c = fit_scale(b11, b12, &valid)
        .ok_or_else(|| Error::invalid("single_pass_mb", "no valid pixels in scene"))?;
    let data = (0..b11.len())
        .map(|i| if valid[i] { c * b12[i] / b11[i] - 1.0 } else { 0.0 })
        .collect();
    Ok(Retrieval {
        plane: Plane {
            height: patch.height(),
            width: patch.width(),
            data,
        },
        valid,
    })
}

pub fn mbmp_retrieval(pair: &PassPair) -> Result<Retrieval> {
    let plume = single_pass_mb(&pair.plume_pass)?;
    let reference = single_pass_mb(&pair.ref_pass)?;
    let valid: Vec<bool> = plume
        .valid
        .iter()
        .zip(&reference.valid)
        .map(|(&a, &b)| a && b)
        .collect();
    let data = plume
        .plane
        .data
        .iter()
        .zip(&reference.plane.data)
        .zip(&valid)
        .map(|((&a, &b), &v)| if v { a - b } else { 0.0 })
        .collect();
    Ok(Retrieval {
        plane: Plane {
            height: plume.plane.height,
            width: plume.plane.width,
            data,
        },
        valid,
    })
}

/// Pixels with retrieval strictly below a negative `threshold`.
pub fn mbmp_mask(retrieval: &Plane, threshold: f64) -> Result<PlumeMask> {
    if !(threshold < 0.0) {
        return Err(Error::invalid(
            "mbmp_mask",
            format!("threshold must be negative, got {threshold}"),
        ));
    }
    Ok(PlumeMask {
        height: retrieval.height,
        width: retrieval.width,
        values: retrieval.data.iter().map(|&r| r < threshold).collect(),
        patch_id: None,
    })
}
