//! Scene- and pixel-level evaluation.
//!
//! A scene counts as a plume detection when its predicted mask contains a
//! connected region strictly larger than `min_pixels` (90 by default).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::PlumeMask;

pub const DEFAULT_MIN_REGION_PIXELS: usize = 90;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse::<u8>()
            .map_err(|e| e.to_string())
            .and_then(Connectivity::try_from)
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug)]
struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        Self {
            parent: Vec::new(),
            size: Vec::new(),
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        self.size.push(1);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

/// Labeled connected regions of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per-pixel region id, 0 for background, `1..=sizes.len()` otherwise.
    pub labels: Vec<u32>,
    /// Pixel count of region `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn largest(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Two-pass union-find labeling. Region ids follow raster order of each
/// region's first pixel.
pub fn connected_components(mask: &PlumeMask, connectivity: Connectivity) -> Components {
    let (h, w) = (mask.height, mask.width);
    let mut provisional = vec![u32::MAX; h * w];
    let mut uf = UnionFind::new();

    // Already-visited neighbours in raster order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0)],
        Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
    };

    for y in 0..h {
        for x in 0..w {
            if !mask.values[y * w + x] {
                continue;
            }
            let mut label = u32::MAX;
            for &(dy, dx) in back {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let n = provisional[ny as usize * w + nx as usize];
                if n == u32::MAX {
                    continue;
                }
                if label == u32::MAX {
                    label = n;
                } else {
                    uf.union(label, n);
                }
            }
            if label == u32::MAX {
                label = uf.make();
            }
            provisional[y * w + x] = label;
        }
    }

    let mut final_id = vec![0u32; uf.parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; h * w];
    for (i, &p) in provisional.iter().enumerate() {
        if p == u32::MAX {
            continue;
        }
        let root = uf.find(p) as usize;
        if final_id[root] == 0 {
            sizes.push(0);
            final_id[root] = sizes.len() as u32;
        }
        let id = final_id[root];
        labels[i] = id;
        sizes[id as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Scene verdict: true iff the largest region has more than `min_pixels`.
pub fn scene_label(mask: &PlumeMask, min_pixels: usize, connectivity: Connectivity) -> bool {
    connected_components(mask, connectivity).largest() > min_pixels
}

/// Counts and rates of the scene-level confusion matrix. Rates whose
/// denominator is zero are `None` and serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn scene_metrics(pred: &[bool], truth: &[bool]) -> Result<SceneMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "scene_metrics",
            "labels",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("scene_metrics", "no scenes"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let recall = ratio(tp, tp + fn_);
    let fpr = ratio(fp, fp + tn);
    Ok(SceneMetrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy: ratio(tp + tn, pred.len()),
        balanced_accuracy: recall.zip(fpr).map(|(r, f)| (r + (1.0 - f)) / 2.0),
        precision: ratio(tp, tp + fp),
        recall,
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        fpr,
        fnr: ratio(fn_, tp + fn_),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    #[serde(rename = "pixel_miou")]
    pub miou: f64,
    #[serde(rename = "pixel_balanced_accuracy")]
    pub balanced_accuracy: Option<f64>,
}

/// Plume-class and background-class IoU of one scene; an empty union
/// counts as IoU 1.
pub fn scene_iou(pred: &PlumeMask, truth: &PlumeMask) -> Result<(f64, f64)> {
    check_aligned(pred, truth)?;
    let (mut inter_fg, mut union_fg, mut inter_bg, mut union_bg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.values.iter().zip(&truth.values) {
        inter_fg += (p && t) as usize;
        union_fg += (p || t) as usize;
        inter_bg += (!p && !t) as usize;
        union_bg += (!p || !t) as usize;
    }
    let iou = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok((iou(inter_fg, union_fg), iou(inter_bg, union_bg)))
}

fn check_aligned(pred: &PlumeMask, truth: &PlumeMask) -> Result<()> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "pixel_metrics",
            "mask",
            format!(
                "{}×{} vs {}×{}",
                pred.height, pred.width, truth.height, truth.width
            ),
        ));
    }
    Ok(())
}

pub fn pixel_metrics(pred: &[PlumeMask], truth: &[PlumeMask]) -> Result<PixelMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "pixel_metrics",
            "scenes",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("pixel_metrics", "no scenes"));
    }
    let mut miou_sum = 0.0;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (fg, bg) = scene_iou(p, t)?;
        miou_sum += (fg + bg) / 2.0;
        for (&a, &b) in p.values.iter().zip(&t.values) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let tpr = ratio(tp, tp + fn_);
    let tnr = ratio(tn, tn + fp);
    Ok(PixelMetrics {
        miou: miou_sum / pred.len() as f64,
        balanced_accuracy: tpr.zip(tnr).map(|(a, b)| (a + b) / 2.0),
    })
}

/// Options controlling how predictions become scene verdicts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Probability above which a pixel is positive.
    pub probability: f64,
    pub min_region_pixels: usize,
    pub connectivity: Connectivity,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            probability: 0.5,
            min_region_pixels: DEFAULT_MIN_REGION_PIXELS,
            connectivity: Connectivity::Eight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    #[serde(flatten)]
    pub scene: SceneMetrics,
    #[serde(flatten)]
    pub pixel: PixelMetrics,
}

impl MetricsReport {
    /// Evaluate predicted masks against truth. Scene truth is "mask has any
    /// positive pixel".
    pub fn from_masks(
        pred: &[PlumeMask],
        truth: &[PlumeMask],
        thresholds: &Thresholds,
    ) -> Result<Self> {
        let pred_labels: Vec<bool> = pred
            .iter()
            .map(|m| scene_label(m, thresholds.min_region_pixels, thresholds.connectivity))
            .collect();
        let truth_labels: Vec<bool> = truth.iter().map(|m| m.positive_count() > 0).collect();
        Ok(Self {
            n_scenes: pred.len(),
            scene: scene_metrics(&pred_labels, &truth_labels)?,
            pixel: pixel_metrics(pred, truth)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.scene;
        writeln!(f, "{:<26}{:>12}", "scenes", self.n_scenes)?;
        writeln!(f, "{:<26}{:>12}", "tp / fp / fn / tn", format!("{}/{}/{}/{}", s.tp, s.fp, s.fn_, s.tn))?;
        for (name, v) in [
            ("accuracy", s.accuracy),
            ("balanced accuracy", s.balanced_accuracy),
            ("precision", s.precision),
            ("recall", s.recall),
            ("f1", s.f1),
            ("fpr", s.fpr),
            ("fnr", s.fnr),
            ("pixel mIoU", Some(self.pixel.miou)),
            ("pixel balanced accuracy", self.pixel.balanced_accuracy),
        ] {
            writeln!(f, "{:<26}{:>12}", name, cell(v))?;
        }
        Ok(())
    }
}
