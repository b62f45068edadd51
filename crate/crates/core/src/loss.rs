//! Per-pixel segmentation losses on sigmoid probabilities: focal loss,
//! binary cross-entropy and positively weighted BCE. All reduce by the mean
//! over every pixel of the batch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, PointwiseLoss, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Focal,
    Bce,
    WeightedBce,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "focal" => Ok(LossKind::Focal),
            "bce" => Ok(LossKind::Bce),
            "weighted_bce" | "weighted-bce" => Ok(LossKind::WeightedBce),
            other => Err(format!("unknown loss {other:?} (focal|bce|weighted_bce)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focal weight of the positive class.
    pub alpha: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Weighted-BCE multiplier on positive pixels.
    pub pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Focal,
            alpha: 0.75,
            gamma: 2.0,
            pos_weight: 3.0,
        }
    }
}

impl LossConfig {
    pub fn focal(alpha: f64, gamma: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            alpha,
            gamma,
            ..Self::default()
        }
    }

    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            ..Self::default()
        }
    }

    pub fn weighted_bce(pos_weight: f64) -> Self {
        Self {
            kind: LossKind::WeightedBce,
            pos_weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Focal => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return Err(Error::invalid("loss", "focal alpha must lie in (0, 1)"));
                }
                if !(self.gamma >= 0.0) {
                    return Err(Error::invalid("loss", "focal gamma must be non-negative"));
                }
            }
            LossKind::WeightedBce if !(self.pos_weight > 0.0) => {
                return Err(Error::invalid("loss", "pos_weight must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Mean loss of `pred` against `target`, recorded on the tape.
    pub fn apply(&self, graph: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
        self.validate()?;
        graph.pointwise_loss(pred, target, Arc::new(*self))
    }

    /// Mean loss evaluated directly on slices.
    pub fn evaluate(&self, pred: &[f64], target: &[f64]) -> Result<f64> {
        self.validate()?;
        if pred.len() != target.len() {
            return Err(Error::shape(
                "loss",
                "target",
                format!("{} predictions vs {} targets", pred.len(), target.len()),
            ));
        }
        if pred.is_empty() {
            return Err(Error::invalid("loss", "empty prediction"));
        }
        let total: f64 = pred
            .iter()
            .zip(target)
            .map(|(&p, &y)| self.value(p, y))
            .sum();
        Ok(total / pred.len() as f64)
    }
}

fn clamp(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, false)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, false)
    } else {
        (p, true)
    }
}

impl PointwiseLoss for LossConfig {
    fn value(&self, p: f64, y: f64) -> f64 {
        let (p, _) = clamp(p);
        match self.kind {
            LossKind::Focal => {
                let (pt, at) = if y >= 0.5 {
                    (p, self.alpha)
                } else {
                    (1.0 - p, 1.0 - self.alpha)
                };
                -at * (1.0 - pt).powf(self.gamma) * pt.ln()
            }
            LossKind::Bce => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
            LossKind::WeightedBce => {
                -(self.pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        }
    }

    fn derivative(&self, p: f64, y: f64) -> f64 {
        let (p, inside) = clamp(p);
        if !inside {
            return 0.0;
        }
        match self.kind {
            LossKind::Focal => {
                let (pt, at, sign) = if y >= 0.5 {
                    (p, self.alpha, 1.0)
                } else {
                    (1.0 - p, 1.0 - self.alpha, -1.0)
                };
                let q = 1.0 - pt;
                let focus = if self.gamma == 0.0 {
                    0.0
                } else {
                    self.gamma * q.powf(self.gamma - 1.0) * pt.ln()
                };
                sign * at * (focus - q.powf(self.gamma) / pt)
            }
            LossKind::Bce => -y / p + (1.0 - y) / (1.0 - p),
            LossKind::WeightedBce => -self.pos_weight * y / p + (1.0 - y) / (1.0 - p),
        }
    }
}

pub fn focal_loss(pred: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    LossConfig::focal(alpha, gamma).evaluate(pred, target)
}

pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    LossConfig::bce().evaluate(pred, target)
}

pub fn weighted_bce_loss(pred: &[f64], target: &[f64], pos_weight: f64) -> Result<f64> {
    LossConfig::weighted_bce(pos_weight).evaluate(pred, target)
}
