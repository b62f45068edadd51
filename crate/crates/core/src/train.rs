//! Optimization loop: Adam, plateau learning-rate decay, per-epoch
//! resampling, best-validation checkpointing and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, crop, epoch_sampler, load_scenes, model_input, rng_for, AugmentConfig, CropMode,
    DatasetManifest, NormalizationStats, Scene, Split,
};
use crate::engine::{backward, Graph, Mode, Tensor};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{scene_label, scene_metrics, MetricsReport, Thresholds};
use crate::model::{AttentionMode, AttentionUNet, Checkpoint, ModelConfig};
use crate::spectral::PlumeMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(
        &mut self,
        params: &mut IndexMap<String, Tensor>,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 7,
            min_delta: 1e-6,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve by `min_delta` for more than `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: SchedulerConfig,
    lr: f64,
    best: f64,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: SchedulerConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter > self.cfg.patience {
                self.lr *= self.cfg.factor;
                self.counter = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub scheduler: SchedulerConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub neg_ratio: usize,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Split used for validation loss, scheduling and best-model selection.
    pub val_split: Split,
    /// Optional global L2 gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    pub thresholds: Thresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            batch_size: 16,
            loss: LossConfig::default(),
            scheduler: SchedulerConfig::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            neg_ratio: 2,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            val_split: Split::Val,
            max_grad_norm: None,
            thresholds: Thresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "train config";
        if !(self.lr > 0.0) {
            return Err(Error::invalid(OP, "lr must be positive"));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::invalid(OP, "scheduler factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(OP, "batch_size must be positive"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::invalid(OP, "max_grad_norm must be positive"));
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        use_ndmi(&self.model)?;
        Ok(())
    }
}

/// Whether a model expects the NDMI channel, from its input width.
pub fn use_ndmi(model: &ModelConfig) -> Result<bool> {
    match model.in_channels {
        13 => Ok(true),
        12 => Ok(false),
        other => Err(Error::shape(
            "model input",
            "channels",
            format!("expected 12 (bands) or 13 (bands + NDMI), got {other}"),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub val_f1: Option<f64>,
    #[serde(skip)]
    pub sampled_with_replacement: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,val_f1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let f1 = r.val_f1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.lr, f1
        );
    }
    out
}

fn batch_tensors(
    samples: &[(Vec<f64>, Vec<f64>)],
    channels: usize,
    size: usize,
) -> Result<(Tensor, Tensor)> {
    let b = samples.len();
    let mut x = Vec::with_capacity(b * channels * size * size);
    let mut y = Vec::with_capacity(b * size * size);
    for (input, target) in samples {
        x.extend_from_slice(input);
        y.extend_from_slice(target);
    }
    Ok((
        Tensor::new(&[b, channels, size, size], x)?,
        Tensor::new(&[b, 1, size, size], y)?,
    ))
}

/// Mean loss of one batch and, when `with_grads`, parameter gradients plus
/// the batch-norm statistics the pass produced.
pub struct BatchResult {
    pub loss: f64,
    pub grads: IndexMap<String, Tensor>,
    pub running: IndexMap<String, crate::engine::RunningStats>,
}

pub fn batch_loss(
    model: &AttentionUNet,
    input: &Tensor,
    target: &Tensor,
    loss: &LossConfig,
    mode: Mode,
    with_grads: bool,
) -> Result<BatchResult> {
    let mut graph = Graph::new();
    let vars = model.bind(&mut graph, with_grads);
    let x = graph.constant(input.clone());
    let fwd = model.forward_graph(&mut graph, &vars, x, mode, AttentionMode::Learned)?;
    let l = loss.apply(&mut graph, fwd.prob, target)?;
    let value = graph.value(l).data()[0];
    let grads = if with_grads {
        let mut g = backward(&graph, l)?;
        vars.iter()
            .map(|(n, v)| {
                let t = g
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(*v)));
                (n.clone(), t)
            })
            .collect()
    } else {
        IndexMap::new()
    };
    Ok(BatchResult {
        loss: value,
        grads,
        running: fwd.running,
    })
}

fn clip_gradients(grads: &mut IndexMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Forward, backward and one Adam step on a fixed batch in train mode.
/// Returns the loss before the update.
pub fn train_step(
    model: &mut AttentionUNet,
    adam: &mut Adam,
    input: &Tensor,
    target: &Tensor,
    loss: &LossConfig,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<f64> {
    let mut r = batch_loss(model, input, target, loss, Mode::Train, true)?;
    if !r.loss.is_finite() {
        return Ok(r.loss);
    }
    if let Some(n) = max_grad_norm {
        clip_gradients(&mut r.grads, n);
    }
    adam.update(model.params_mut(), &r.grads, lr);
    model.set_running(r.running);
    Ok(r.loss)
}

/// Per-scene outcome of an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenePrediction {
    pub id: String,
    pub plume: bool,
    pub largest_region: usize,
    #[serde(skip)]
    pub mask: PlumeMask,
    #[serde(skip)]
    pub prob: Vec<f64>,
}

/// Centre-cropped eval-mode predictions for `scenes`, with the mean loss
/// against their truth masks.
pub fn predict_scenes(
    model: &AttentionUNet,
    normalization: &NormalizationStats,
    scenes: &[Scene],
    thresholds: &Thresholds,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<(Vec<ScenePrediction>, Vec<PlumeMask>, f64)> {
    let cfg = model.config();
    let ndmi = use_ndmi(cfg)?;
    let size = cfg.input_size;
    let mut preds = Vec::with_capacity(scenes.len());
    let mut truths = Vec::with_capacity(scenes.len());
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    let mut rng = rng_for(&[0]);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let mut samples = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (p, m) = crop(&s.patch, &s.mask, CropMode::Center, size, &mut rng)?;
            samples.push((model_input(&p, ndmi, normalization)?, m.as_f64()));
            truths.push(m);
        }
        let (x, y) = batch_tensors(&samples, cfg.in_channels, size)?;
        let prob = model.predict(&x)?;
        loss_sum += loss.evaluate(prob.data(), y.data())? * y.numel() as f64;
        pixels += y.numel();
        for (s, p) in chunk.iter().zip(prob.data().chunks_exact(size * size)) {
            let mask = PlumeMask::from_threshold(size, size, p, thresholds.probability);
            let largest = crate::metrics::connected_components(&mask, thresholds.connectivity)
                .largest();
            preds.push(ScenePrediction {
                id: s.id.clone(),
                plume: scene_label(&mask, thresholds.min_region_pixels, thresholds.connectivity),
                largest_region: largest,
                mask,
                prob: p.to_vec(),
            });
        }
    }
    let mean = if pixels == 0 { 0.0 } else { loss_sum / pixels as f64 };
    Ok((preds, truths, mean))
}

/// Full metric report of a checkpoint on one split.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    thresholds: &Thresholds,
) -> Result<(MetricsReport, Vec<ScenePrediction>)> {
    let scenes = load_scenes(manifest, split)?;
    if scenes.is_empty() {
        return Err(Error::invalid("evaluate", format!("split {split:?} is empty")));
    }
    let norm = normalization_for(ckpt.normalization.as_ref(), manifest)?;
    let (preds, truths, _) = predict_scenes(
        &ckpt.model,
        &norm,
        &scenes,
        thresholds,
        &LossConfig::default(),
        8,
    )?;
    let masks: Vec<PlumeMask> = preds.iter().map(|p| p.mask.clone()).collect();
    let report = MetricsReport::from_masks(&masks, &truths, thresholds)?;
    Ok((report, preds))
}

/// Metric report for externally produced masks aligned with truth.
pub fn evaluate_masks(
    pred: &[PlumeMask],
    truth: &[PlumeMask],
    thresholds: &Thresholds,
) -> Result<MetricsReport> {
    MetricsReport::from_masks(pred, truth, thresholds)
}

fn normalization_for(
    stored: Option<&NormalizationStats>,
    manifest: &DatasetManifest,
) -> Result<NormalizationStats> {
    if let Some(n) = stored.or(manifest.normalization.as_ref()) {
        return Ok(n.clone());
    }
    let mut m = manifest.clone();
    Ok(m.compute_normalization()?.clone())
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// `best.ckpt.*`, `last.ckpt.*` and `history.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.best.save(&dir.join("best.ckpt.json"))?;
        self.last.save(&dir.join("last.ckpt.json"))?;
        let path = dir.join("history.csv");
        fs::write(&path, history_csv(&self.history)).map_err(|e| Error::io(&path, e))
    }
}

pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ndmi = use_ndmi(&cfg.model)?;
    let norm = normalization_for(None, manifest)?;
    let train_scenes = load_scenes(manifest, Split::Train)?;
    let val_scenes = load_scenes(manifest, cfg.val_split)?;
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::invalid(
            "train",
            "manifest needs non-empty training and validation splits",
        ));
    }
    let by_index: IndexMap<usize, &Scene> = train_scenes.iter().map(|s| (s.index, s)).collect();

    let mut model = AttentionUNet::new(cfg.model.clone(), cfg.seed)?;
    let initial = Checkpoint::new(model.clone(), Some(norm.clone()));
    let mut best = initial.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut adam = Adam::new(cfg.optimizer);
    let mut scheduler = PlateauScheduler::new(cfg.scheduler, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let size = cfg.model.input_size;

    for epoch in 0..cfg.epochs {
        let lr = scheduler.lr();
        let sample = epoch_sampler(manifest, Split::Train, cfg.neg_ratio, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, ids) in sample.ids.chunks(cfg.batch_size).enumerate() {
            let mut samples = Vec::with_capacity(ids.len());
            for (k, id) in ids.iter().enumerate() {
                let scene = by_index[id];
                let pos = (b * cfg.batch_size + k) as u64;
                let mut rng = rng_for(&[cfg.seed, epoch as u64, pos, 0x7472]);
                let (p, m) = crop(&scene.patch, &scene.mask, CropMode::Random, size, &mut rng)?;
                let (p, m) = augment(&p, &m, &mut rng, &cfg.augment, &norm)?;
                samples.push((model_input(&p, ndmi, &norm)?, m.as_f64()));
            }
            let (x, y) = batch_tensors(&samples, cfg.model.in_channels, size)?;
            let loss = train_step(
                &mut model,
                &mut adam,
                &x,
                &y,
                &cfg.loss,
                lr,
                cfg.max_grad_norm,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            loss_sum += loss * ids.len() as f64;
            seen += ids.len();
        }
        let (preds, _, val_loss) = predict_scenes(
            &model,
            &norm,
            &val_scenes,
            &cfg.thresholds,
            &cfg.loss,
            cfg.batch_size,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        let pred_labels: Vec<bool> = preds.iter().map(|p| p.plume).collect();
        let truth_labels: Vec<bool> = val_scenes.iter().map(|s| s.mask.positive_count() > 0).collect();
        let val_f1 = scene_metrics(&pred_labels, &truth_labels)?.f1;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            lr,
            val_f1,
            sampled_with_replacement: sample.with_replacement,
        };
        on_epoch(&record);
        history.push(record);
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch + 1;
            best = Checkpoint::new(model.clone(), Some(norm.clone()));
        }
        scheduler.step(val_loss);
    }
    Ok(TrainOutcome {
        best,
        last: Checkpoint::new(model, Some(norm)),
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_never_drops_on_improvement() {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1e-4);
        for i in 0..50 {
            assert_eq!(s.step(10.0 - i as f64 * 0.1), 1e-4);
        }
    }

    #[test]
    fn scheduler_hand_trace() {
        let cfg = SchedulerConfig {
            patience: 2,
            ..SchedulerConfig::default()
        };
        let mut s = PlateauScheduler::new(cfg, 1.0);
        let lrs: Vec<f64> = [1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.step(l)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
        for _ in 0..3 {
            s.step(1.0);
        }
        assert_eq!(s.lr(), 0.25);
    }

    #[test]
    fn scheduler_min_delta() {
        let cfg = SchedulerConfig {
            patience: 0,
            ..SchedulerConfig::default()
        };
        let mut s = PlateauScheduler::new(cfg, 1.0);
        s.step(1.0);
        assert_eq!(s.step(1.0 - 5e-7), 0.5);
    }

    #[test]
    fn adam_scalar_trace() {
        let mut params: IndexMap<String, Tensor> = IndexMap::new();
        params.insert("w".into(), Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default());
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=3 {
            // f(w) = w², gradient 2w
            let g = 2.0 * w;
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), Tensor::scalar(g));
            adam.update(&mut params, &grads, lr);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
            assert!((params["w"].data()[0] - w).abs() < 1e-12);
        }
        // First step of Adam moves by lr regardless of gradient scale.
        assert!((params["w"].data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            scheduler: SchedulerConfig {
                factor: 1.0,
                ..SchedulerConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            model: ModelConfig {
                in_channels: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_format() {
        let rows = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
            val_f1: None,
            sampled_with_replacement: false,
        }];
        assert_eq!(
            history_csv(&rows),
            "epoch,train_loss,val_loss,lr,val_f1\n1,0.5,0.25,0.0001,\n"
        );
    }
}
