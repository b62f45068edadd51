//! Attention-gated U-Net for binary plume segmentation, its checkpoint
//! format, and Grad-CAM.
//!
//! Encoder stage `s` has `base_filters·2^s` channels and is followed by 2×2
//! max pooling; the bottleneck doubles once more. Each decoder stage
//! upsamples with a stride-2 transposed convolution, gates the matching skip
//! connection with an additive attention gate driven by the upsampled
//! signal, concatenates `[gated skip, upsampled]` and applies two 3×3
//! convolutions. A 1×1 convolution and a sigmoid produce the mask.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rng_for, NormalizationStats};
use crate::engine::{backward, BatchNormConfig, Graph, Mode, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::spectral::Plane;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrder {
    #[default]
    ConvReluBn,
    ConvBnRelu,
}

impl std::str::FromStr for BlockOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conv-relu-bn" => Ok(BlockOrder::ConvReluBn),
            "conv-bn-relu" => Ok(BlockOrder::ConvBnRelu),
            other => Err(format!("unknown block order {other:?} (conv-relu-bn|conv-bn-relu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    /// Attention-gate intermediate width as a fraction of the skip width.
    pub att_inter_ratio: f64,
    pub block_order: BlockOrder,
    /// Square input extent; must be divisible by `2^depth`.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 13,
            base_filters: 64,
            depth: 4,
            att_inter_ratio: 0.5,
            block_order: BlockOrder::ConvReluBn,
            input_size: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model config";
        if self.in_channels == 0 || self.base_filters == 0 || self.depth == 0 {
            return Err(Error::invalid(
                OP,
                "in_channels, base_filters and depth must be positive",
            ));
        }
        if !(self.att_inter_ratio > 0.0 && self.att_inter_ratio <= 1.0) {
            return Err(Error::invalid(OP, "att_inter_ratio must lie in (0, 1]"));
        }
        if self.depth >= usize::BITS as usize - 1 {
            return Err(Error::invalid(OP, "depth too large"));
        }
        let factor = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::invalid(
                OP,
                format!(
                    "input size {} is not divisible by 2^{} = {factor}",
                    self.input_size, self.depth
                ),
            ));
        }
        Ok(())
    }

    /// Channel width of encoder stage `s`; `s == depth` is the bottleneck.
    pub fn width(&self, s: usize) -> usize {
        self.base_filters << s
    }

    pub fn gate_width(&self, s: usize) -> usize {
        ((self.width(s) as f64 * self.att_inter_ratio).round() as usize).max(1)
    }

    /// Every parameter tensor in canonical order with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, f: usize| {
            for (i, c) in [(1, cin), (2, f)] {
                out.push((format!("{name}.conv{i}.weight"), vec![f, c, 3, 3]));
                out.push((format!("{name}.conv{i}.bias"), vec![f]));
                out.push((format!("{name}.bn{i}.gamma"), vec![f]));
                out.push((format!("{name}.bn{i}.beta"), vec![f]));
            }
        };
        let mut cin = self.in_channels;
        for s in 0..self.depth {
            block(&mut out, &format!("enc{s}"), cin, self.width(s));
            cin = self.width(s);
        }
        block(&mut out, "bottleneck", cin, self.width(self.depth));
        for s in (0..self.depth).rev() {
            let f = self.width(s);
            let fi = self.gate_width(s);
            out.push((format!("dec{s}.up.weight"), vec![2 * f, f, 2, 2]));
            out.push((format!("dec{s}.att.wg.weight"), vec![fi, f, 1, 1]));
            out.push((format!("dec{s}.att.wg.bias"), vec![fi]));
            out.push((format!("dec{s}.att.wx.weight"), vec![fi, f, 1, 1]));
            out.push((format!("dec{s}.att.psi.weight"), vec![1, fi, 1, 1]));
            out.push((format!("dec{s}.att.psi.bias"), vec![1]));
            block(&mut out, &format!("dec{s}"), 2 * f, f);
        }
        out.push(("head.weight".into(), vec![1, self.width(0), 1, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    /// Batch-norm layer names with their channel counts.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mut push = |name: String, f: usize| {
            out.push((format!("{name}.bn1"), f));
            out.push((format!("{name}.bn2"), f));
        };
        for s in 0..self.depth {
            push(format!("enc{s}"), self.width(s));
        }
        push("bottleneck".into(), self.width(self.depth));
        for s in (0..self.depth).rev() {
            push(format!("dec{s}"), self.width(s));
        }
        out
    }

    /// Names and `[C, H, W]` of every block output for a single input, in
    /// forward order.
    pub fn activation_shapes(&self) -> Vec<(String, [usize; 3])> {
        let mut out = Vec::new();
        for s in 0..self.depth {
            out.push((format!("enc{s}"), [self.width(s), self.input_size >> s, self.input_size >> s]));
        }
        let b = self.input_size >> self.depth;
        out.push(("bottleneck".into(), [self.width(self.depth), b, b]));
        for s in (0..self.depth).rev() {
            out.push((format!("dec{s}"), [self.width(s), self.input_size >> s, self.input_size >> s]));
        }
        out
    }
}

/// How attention gates act during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Gates computed as usual but every α replaced by 1.
    ForcedOne,
    /// Skip connections pass straight through, as in a plain U-Net.
    Plain,
}

/// Parameter handles of one attention gate.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub wg: Var,
    pub bg: Var,
    pub wx: Var,
    pub psi: Var,
    pub bpsi: Var,
}

/// `α = σ(ψ(relu(Wg·g + bg + Wx·x)) + bψ)`; returns `(α ⊙ x, α)`.
pub fn attention_gate(graph: &mut Graph, g: Var, x: Var, p: &GateVars) -> Result<(Var, Var)> {
    let (gs, xs) = (graph.shape(g), graph.shape(x));
    if gs.len() != 4 || xs.len() != 4 || gs[0] != xs[0] || gs[2..] != xs[2..] {
        return Err(Error::shape(
            "attention_gate",
            "spatial",
            format!("gating {gs:?} vs skip {xs:?}"),
        ));
    }
    let a = graph.conv2d(g, p.wg, Some(p.bg), 1, 0)?;
    let b = graph.conv2d(x, p.wx, None, 1, 0)?;
    let s = graph.add(a, b)?;
    let r = graph.relu(s);
    let q = graph.conv2d(r, p.psi, Some(p.bpsi), 1, 0)?;
    let alpha = graph.sigmoid(q);
    let gated = graph.channel_gate(alpha, x)?;
    Ok((gated, alpha))
}

/// Result of recording one forward pass on a graph.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub prob: Var,
    /// Block outputs by name (`enc0`, …, `bottleneck`, …, `dec0`).
    pub activations: IndexMap<String, Var>,
    /// Attention maps by decoder stage (`att3`, …, `att0`).
    pub attention: IndexMap<String, Var>,
    /// Batch-norm statistics after this pass; updated only in train mode.
    pub running: IndexMap<String, RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionUNet {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    running: IndexMap<String, RunningStats>,
}

fn kaiming_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl AttentionUNet {
    /// Kaiming-uniform kernels, zero biases, unit γ and zero β; each tensor
    /// draws from its own stream derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
            let t = if name.ends_with(".weight") {
                kaiming_uniform(&shape, &mut rng_for(&[seed, i as u64]))
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        let running = config
            .bn_layers()
            .into_iter()
            .map(|(n, c)| (n, RunningStats::new(c)))
            .collect();
        let model = Self {
            config,
            params,
            running,
        };
        model.shape_audit()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid("model", format!("no parameter {name:?}")))
    }

    pub fn running(&self) -> &IndexMap<String, RunningStats> {
        &self.running
    }

    pub fn set_running(&mut self, running: IndexMap<String, RunningStats>) {
        self.running = running;
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Check every parameter and running statistic against the shapes the
    /// configuration implies.
    pub fn shape_audit(&self) -> Result<()> {
        const OP: &str = "shape audit";
        let expected = self.config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::shape(
                OP,
                "parameter count",
                format!("expected {} tensors, found {}", expected.len(), self.params.len()),
            ));
        }
        for ((name, shape), (have_name, t)) in expected.iter().zip(&self.params) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::shape(
                    OP,
                    "parameter",
                    format!("expected {name} {shape:?}, found {have_name} {:?}", t.shape()),
                ));
            }
        }
        for (name, c) in self.config.bn_layers() {
            match self.running.get(&name) {
                Some(r) if r.mean.len() == c && r.var.len() == c => {}
                _ => {
                    return Err(Error::shape(
                        OP,
                        "running stats",
                        format!("{name}: missing or mis-sized (expected {c})"),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Insert parameters as graph leaves, trainable or constant.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect()
    }

    fn block(
        &self,
        graph: &mut Graph,
        vars: &IndexMap<String, Var>,
        running: &mut IndexMap<String, RunningStats>,
        name: &str,
        mut h: Var,
        mode: Mode,
    ) -> Result<Var> {
        let cfg = BatchNormConfig::new(mode);
        for i in 1..=2 {
            h = graph.conv2d(
                h,
                vars[&format!("{name}.conv{i}.weight")],
                Some(vars[&format!("{name}.conv{i}.bias")]),
                1,
                1,
            )?;
            let gamma = vars[&format!("{name}.bn{i}.gamma")];
            let beta = vars[&format!("{name}.bn{i}.beta")];
            let stats = running
                .get_mut(&format!("{name}.bn{i}"))
                .expect("audited running stats");
            h = match self.config.block_order {
                BlockOrder::ConvReluBn => {
                    let r = graph.relu(h);
                    graph.batchnorm2d(r, gamma, beta, stats, cfg)?
                }
                BlockOrder::ConvBnRelu => {
                    let b = graph.batchnorm2d(h, gamma, beta, stats, cfg)?;
                    graph.relu(b)
                }
            };
        }
        Ok(h)
    }

    /// Record a forward pass of `input` `[N, C, S, S]` on `graph` using
    /// parameter handles from [`AttentionUNet::bind`].
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        vars: &IndexMap<String, Var>,
        input: Var,
        mode: Mode,
        attention: AttentionMode,
    ) -> Result<Forward> {
        const OP: &str = "forward";
        let shape = graph.shape(input).to_vec();
        let c = &self.config;
        if shape.len() != 4 {
            return Err(Error::shape(OP, "rank", format!("expected [N,C,H,W], got {shape:?}")));
        }
        if shape[1] != c.in_channels {
            return Err(Error::shape(
                OP,
                "channels",
                format!("model expects {} channels, input has {}", c.in_channels, shape[1]),
            ));
        }
        if shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::shape(
                OP,
                "spatial",
                format!(
                    "model expects {0}×{0}, input is {1}×{2}",
                    c.input_size, shape[2], shape[3]
                ),
            ));
        }
        let mut running = self.running.clone();
        let mut activations = IndexMap::new();
        let mut attention_maps = IndexMap::new();
        let mut skips = Vec::with_capacity(c.depth);
        let mut h = input;
        for s in 0..c.depth {
            let name = format!("enc{s}");
            let out = self.block(graph, vars, &mut running, &name, h, mode)?;
            activations.insert(name, out);
            skips.push(out);
            h = graph.maxpool2d(out, 2)?;
        }
        h = self.block(graph, vars, &mut running, "bottleneck", h, mode)?;
        activations.insert("bottleneck".into(), h);
        for s in (0..c.depth).rev() {
            let up = graph.conv_transpose2d(h, vars[&format!("dec{s}.up.weight")], 2)?;
            let skip = skips[s];
            let gated = match attention {
                AttentionMode::Plain => skip,
                AttentionMode::Learned | AttentionMode::ForcedOne => {
                    let gv = GateVars {
                        wg: vars[&format!("dec{s}.att.wg.weight")],
                        bg: vars[&format!("dec{s}.att.wg.bias")],
                        wx: vars[&format!("dec{s}.att.wx.weight")],
                        psi: vars[&format!("dec{s}.att.psi.weight")],
                        bpsi: vars[&format!("dec{s}.att.psi.bias")],
                    };
                    let (gated, alpha) = attention_gate(graph, up, skip, &gv)?;
                    attention_maps.insert(format!("att{s}"), alpha);
                    if attention == AttentionMode::ForcedOne {
                        let ones = graph.constant(Tensor::ones(graph.shape(alpha)));
                        graph.channel_gate(ones, skip)?
                    } else {
                        gated
                    }
                }
            };
            let cat = graph.concat_channels(gated, up)?;
            let name = format!("dec{s}");
            h = self.block(graph, vars, &mut running, &name, cat, mode)?;
            activations.insert(name, h);
        }
        let logits = graph.conv2d(h, vars["head.weight"], Some(vars["head.bias"]), 1, 0)?;
        let prob = graph.sigmoid(logits);
        Ok(Forward {
            logits,
            prob,
            activations,
            attention: attention_maps,
            running,
        })
    }

    /// Eval-mode probabilities for `input` `[N, C, S, S]`.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.predict_with(input, AttentionMode::Learned)
    }

    pub fn predict_with(&self, input: &Tensor, attention: AttentionMode) -> Result<Tensor> {
        let mut graph = Graph::new();
        let vars = self.bind(&mut graph, false);
        let x = graph.constant(input.clone());
        let fwd = self.forward_graph(&mut graph, &vars, x, Mode::Eval, attention)?;
        Ok(graph.value(fwd.prob).clone())
    }
}

/// Grad-CAM output for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Input-resolution heatmap in `[0, 1]`.
    pub heatmap: Plane,
    /// Number of predicted plume pixels whose logits formed the target.
    pub target_pixels: usize,
    /// True when no pixel exceeded 0.5 and every logit was summed instead.
    pub fallback: bool,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |d: usize, n_in: usize, n_out: usize| {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Combine activations `[K, h, w]` with their target gradients into a
/// normalized heatmap of `out_h × out_w`.
pub fn gradcam_map(
    activation: &[f64],
    gradient: &[f64],
    k: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Plane {
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for c in 0..k {
        let g = &gradient[c * plane..(c + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        for (o, a) in cam.iter_mut().zip(&activation[c * plane..(c + 1) * plane]) {
            *o += weight * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let mut data = bilinear_resize(&cam, h, w, out_h, out_w);
    let max = data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut data {
            *v /= max;
        }
    }
    Plane {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Grad-CAM of block `layer` for a single input `[1, C, S, S]`. The target is
/// the sum of logits over pixels predicted as plume (probability > 0.5), or
/// over all pixels when none are.
pub fn gradcam(model: &AttentionUNet, input: &Tensor, layer: &str) -> Result<GradCam> {
    let names: Vec<String> = model
        .config
        .activation_shapes()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    if !names.iter().any(|n| n == layer) {
        return Err(Error::invalid(
            "gradcam",
            format!("unknown layer {layer:?}; expected one of {}", names.join(", ")),
        ));
    }
    if input.shape().first() != Some(&1) {
        return Err(Error::shape("gradcam", "batch", "expects a single input"));
    }
    let mut graph = Graph::new();
    let vars = model.bind(&mut graph, false);
    // A trainable input makes every activation carry a gradient.
    let x = graph.param(input.clone());
    let fwd = model.forward_graph(&mut graph, &vars, x, Mode::Eval, AttentionMode::Learned)?;
    let act = fwd.activations[layer];
    graph.retain_grad(act);
    let predicted: Vec<bool> = graph.value(fwd.prob).data().iter().map(|&p| p > 0.5).collect();
    let target_pixels = predicted.iter().filter(|&&b| b).count();
    let fallback = target_pixels == 0;
    let target = if fallback {
        graph.sum(fwd.logits)
    } else {
        graph.masked_sum(fwd.logits, predicted)?
    };
    let grads = backward(&graph, target)?;
    let a = graph.value(act);
    let g = grads
        .get(act)
        .ok_or_else(|| Error::invalid("gradcam", "activation received no gradient"))?;
    let (_, k, h, w) = a.dims4("gradcam")?;
    let s = model.config.input_size;
    Ok(GradCam {
        heatmap: gradcam_map(a.data(), g.data(), k, h, w, s, s),
        target_pixels,
        fallback,
    })
}

pub const CHECKPOINT_FORMAT: &str = "plumeseg-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    payload: String,
    tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationStats>,
}

/// Trained weights plus the input normalization they expect.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AttentionUNet,
    pub normalization: Option<NormalizationStats>,
}

/// `<name>.ckpt.bin` next to `<name>.ckpt.json`.
pub fn checkpoint_payload_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

impl Checkpoint {
    pub fn new(model: AttentionUNet, normalization: Option<NormalizationStats>) -> Self {
        Self {
            model,
            normalization,
        }
    }

    /// All stored tensors in manifest order: parameters, then running
    /// means and variances.
    fn flat_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        for (n, r) in &self.model.running {
            out.push((format!("{n}.running_mean"), vec![r.mean.len()], r.mean.clone()));
            out.push((format!("{n}.running_var"), vec![r.var.len()], r.var.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bin = checkpoint_payload_path(path);
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, data) in self.flat_tensors() {
            tensors.push(TensorRecord {
                name,
                shape,
                offset: bytes.len(),
            });
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.model.config.clone(),
            payload: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors,
            normalization: self.normalization.clone(),
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown format {:?}", header.format)));
        }
        header.config.validate()?;
        let bin = path.with_file_name(&header.payload);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;

        let mut model = AttentionUNet {
            config: header.config.clone(),
            params: IndexMap::new(),
            running: IndexMap::new(),
        };
        let mut expected: Vec<(String, Vec<usize>)> = header.config.param_shapes();
        for (n, c) in header.config.bn_layers() {
            expected.push((format!("{n}.running_mean"), vec![c]));
            expected.push((format!("{n}.running_var"), vec![c]));
        }
        if expected.len() != header.tensors.len() {
            return Err(Error::format(
                path,
                format!(
                    "manifest lists {} tensors, configuration implies {}",
                    header.tensors.len(),
                    expected.len()
                ),
            ));
        }
        let mut cursor = 0usize;
        let mut pending_mean: Option<Vec<f64>> = None;
        for ((name, shape), rec) in expected.iter().zip(&header.tensors) {
            if &rec.name != name || &rec.shape != shape || rec.offset != cursor {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {} {:?} @{} does not match expected {name} {shape:?} @{cursor}",
                        rec.name, rec.shape, rec.offset
                    ),
                ));
            }
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(Error::format(&bin, "payload truncated"));
            }
            let data: Vec<f64> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cursor = end;
            if name.ends_with(".running_mean") {
                pending_mean = Some(data);
            } else if let Some(layer) = name.strip_suffix(".running_var") {
                let mean = pending_mean.take().expect("mean precedes var");
                model
                    .running
                    .insert(layer.to_string(), RunningStats { mean, var: data });
            } else {
                model.params.insert(name.clone(), Tensor::new(shape, data)?);
            }
        }
        if cursor != bytes.len() {
            return Err(Error::format(&bin, "payload has trailing bytes"));
        }
        model.shape_audit()?;
        Ok(Self {
            model,
            normalization: header.normalization,
        })
    }
}
