//! Layered configuration: built-in defaults, then an optional JSON file,
//! then command-line flags, field by field.

use std::fs;
use std::path::Path;

use plumeseg_core::data::{CorpusConfig, Split};
use plumeseg_core::mbmp::DEFAULT_THRESHOLD;
use plumeseg_core::metrics::Thresholds;
use plumeseg_core::train::TrainConfig;
use plumeseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::{SynthArgs, ThresholdArgs, TrainArgs};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MbmpConfig {
    pub threshold: f64,
    pub split: Option<Split>,
}

impl Default for MbmpConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            split: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub mbmp: MbmpConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::json(p, e))
            }
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn apply_synth(cfg: &mut CorpusConfig, a: &SynthArgs) {
    set(&mut cfg.scenes, a.scenes);
    set(&mut cfg.negative_fraction, a.negative_fraction);
    set(&mut cfg.val_fraction, a.val_fraction);
    set(&mut cfg.test_fraction, a.test_fraction);
    if a.all_train {
        cfg.all_train = true;
    }
    set(&mut cfg.sigma_range.0, a.sigma_min);
    set(&mut cfg.sigma_range.1, a.sigma_max);
    let s = &mut cfg.scene;
    set(&mut s.amplitude, a.amplitude);
    set(&mut s.height, a.size);
    set(&mut s.width, a.size);
    set(&mut s.noise_level, a.noise);
    set(&mut s.terrain_amplitude, a.terrain);
    set(&mut s.profile, a.profile);
    set(&mut s.seed, a.seed);
}

pub fn apply_train(cfg: &mut TrainConfig, a: &TrainArgs) {
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.loss.kind, a.loss);
    set(&mut cfg.loss.alpha, a.alpha);
    set(&mut cfg.loss.gamma, a.gamma);
    set(&mut cfg.loss.pos_weight, a.pos_weight);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.model.base_filters, a.base_filters);
    set(&mut cfg.model.depth, a.depth);
    set(&mut cfg.model.block_order, a.block_order);
    if a.no_ndmi {
        cfg.model.in_channels = 12;
    }
    set(&mut cfg.neg_ratio, a.neg_ratio);
    set(&mut cfg.val_split, a.val_split);
    if a.max_grad_norm.is_some() {
        cfg.max_grad_norm = a.max_grad_norm;
    }
    set(&mut cfg.scheduler.factor, a.factor);
    set(&mut cfg.scheduler.patience, a.patience);
    if a.no_augment {
        cfg.augment.rotate = false;
        cfg.augment.noise_frac = 0.0;
    }
}

pub fn apply_thresholds(t: &mut Thresholds, a: &ThresholdArgs) {
    set(&mut t.probability, a.threshold);
    set(&mut t.min_region_pixels, a.min_region);
    set(&mut t.connectivity, a.connectivity);
}
