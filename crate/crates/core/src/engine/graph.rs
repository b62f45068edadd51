//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever context its
//! adjoint needs. Node ids are assigned in creation order, so the tape is
//! topologically sorted by construction and backward is a single reverse scan.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::kernels::{self, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub mode: Mode,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running mean and (biased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// A per-pixel loss `l(p, y)` reduced by the mean over all elements.
pub trait PointwiseLoss: Send + Sync + fmt::Debug {
    fn value(&self, p: f64, y: f64) -> f64;
    fn derivative(&self, p: f64, y: f64) -> f64;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        window: Window,
        out_channels: usize,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        window: Window,
        in_channels: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize),
    ChannelGate {
        gate: usize,
        input: usize,
    },
    Sum(usize),
    Mean(usize),
    MaskedSum {
        input: usize,
        mask: Vec<bool>,
    },
    Loss {
        pred: usize,
        target: Vec<f64>,
        loss: Arc<dyn PointwiseLoss>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::ConvTranspose2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool { input, .. } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::ChannelGate { gate, input } => vec![*gate, *input],
            Op::MaskedSum { input, .. } => vec![*input],
            Op::Loss { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; [`backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an interior node after [`backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.value(input).dims4(OP)?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4(OP)?;
        if kcin != cin {
            return Err(Error::shape(
                OP,
                "in_channels",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if let Some(b) = bias {
            let bshape = self.shape(b);
            if bshape != [cout] {
                return Err(Error::shape(
                    OP,
                    "bias",
                    format!("expected [{cout}], got {bshape:?}"),
                ));
            }
        }
        let window = check_window(OP, cin, h, w, kh, kw, stride, padding)?;
        let mut out = vec![0.0; n * cout * window.col_cols()];
        kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &window,
            self.value(kernel).data(),
            cout,
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, cout, window.out_h(), window.out_w()], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                window,
                out_channels: cout,
            },
        ))
    }

    /// Transposed convolution with kernel `[Cin, Cout, kh, kw]` and no padding.
    /// Output extent is `(H − 1)·stride + kh`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, cin, h, w) = self.value(input).dims4(OP)?;
        let (kcin, cout, kh, kw) = self.value(kernel).dims4(OP)?;
        if kcin != cin {
            return Err(Error::shape(
                OP,
                "in_channels",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let window = Window {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            padding: 0,
        };
        debug_assert_eq!((window.out_h(), window.out_w()), (h, w));
        let mut out = vec![0.0; n * cout * oh * ow];
        kernels::conv_transpose2d_forward(
            self.value(input).data(),
            n,
            cin,
            &window,
            self.value(kernel).data(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, cout, oh, ow], out);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input: input.0,
                kernel: kernel.0,
                window,
                in_channels: cin,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if k == 0 {
            return Err(Error::invalid(OP, "window must be at least 1"));
        }
        if h % k != 0 {
            return Err(Error::shape(
                OP,
                "height",
                format!("{h} not divisible by {k}"),
            ));
        }
        if w % k != 0 {
            return Err(Error::shape(OP, "width", format!("{w} not divisible by {k}")));
        }
        let mut out = vec![0.0; n * c * (h / k) * (w / k)];
        let argmax =
            kernels::maxpool2d_forward(self.value(input).data(), n * c, h, w, k, &mut out);
        let value = Tensor::from_parts(vec![n, c, h / k, w / k], out);
        Ok(self.push(
            value,
            Op::MaxPool {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Per-channel batch normalization. In train mode `running` is updated
    /// with the batch statistics; in eval mode it is only read.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    OP,
                    name,
                    format!("expected [{c}], got {:?}", self.shape(v)),
                ));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(
                OP,
                "running stats",
                format!("expected {c} channels, got {}", running.mean.len()),
            ));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::invalid(OP, "eps must be positive"));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let (mean, inv_std) = match cfg.mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(x, n, c, plane);
                for ch in 0..c {
                    running.mean[ch] =
                        (1.0 - cfg.momentum) * running.mean[ch] + cfg.momentum * mean[ch];
                    running.var[ch] =
                        (1.0 - cfg.momentum) * running.var[ch] + cfg.momentum * var[ch];
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                running.mean.clone(),
                running
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + cfg.eps).sqrt())
                    .collect(),
            ),
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bn in 0..n {
            for ch in 0..c {
                let off = (bn * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                mode: cfg.mode,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.map(x, |v| v * s);
        self.push(value, Op::Scale(x.0, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    /// Stack two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        for (dim, x, y) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if x != y {
                return Err(Error::shape(OP, dim, format!("{x} vs {y}")));
            }
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(value, Op::Concat(a.0, b.0)))
    }

    /// Multiply `x [N,C,H,W]` by a single-channel map `gate [N,1,H,W]`,
    /// broadcast over channels.
    pub fn channel_gate(&mut self, gate: Var, x: Var) -> Result<Var> {
        const OP: &str = "channel_gate";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let gshape = self.value(gate).dims4(OP)?;
        if gshape != (n, 1, h, w) {
            return Err(Error::shape(
                OP,
                "gate",
                format!("expected [{n}, 1, {h}, {w}], got {:?}", self.shape(gate)),
            ));
        }
        let plane = h * w;
        let (g, xd) = (self.value(gate).data(), self.value(x).data());
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            let gp = &g[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in 0..plane {
                    out[off + j] = gp[j] * xd[off + j];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            value,
            Op::ChannelGate {
                gate: gate.0,
                input: x.0,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(x.0))
    }

    /// Sum of the elements selected by `mask`.
    pub fn masked_sum(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::shape(
                "masked_sum",
                "mask",
                format!("{} entries for {} elements", mask.len(), t.numel()),
            ));
        }
        let s = t
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::MaskedSum {
                input: x.0,
                mask,
            },
        ))
    }

    /// Mean of `loss(p, y)` over every element of `pred`.
    pub fn pointwise_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        loss: Arc<dyn PointwiseLoss>,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "loss",
                "target",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| loss.value(p, y))
            .sum();
        let value = Tensor::scalar(total / p.numel() as f64);
        Ok(self.push(
            value,
            Op::Loss {
                pred: pred.0,
                target: target.data().to_vec(),
                loss,
            },
        ))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                "operands",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn check_window(
    op: &'static str,
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Window> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be at least 1"));
    }
    for (dim, extent, k) in [("height", h, kh), ("width", w, kw)] {
        let padded = extent + 2 * padding;
        if k > padded {
            return Err(Error::shape(
                op,
                dim,
                format!("kernel {k} exceeds padded extent {padded}"),
            ));
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(Error::shape(
                op,
                dim,
                format!("non-integer output extent: ({padded} - {k}) / {stride}"),
            ));
        }
    }
    Ok(Window {
        channels,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
    })
}

/// Gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }
}

/// Reverse pass from a scalar `output`. Returns gradients for every
/// trainable leaf reachable from it, plus nodes marked with
/// [`Graph::retain_grad`].
pub fn backward(graph: &Graph, output: Var) -> Result<Gradients> {
    let out_node = &graph.nodes[output.0];
    if !out_node.value.is_scalar() {
        return Err(Error::invalid(
            "backward",
            format!(
                "output must be scalar, got shape {:?}",
                out_node.value.shape()
            ),
        ));
    }
    let mut slots: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
    slots[output.0] = Some(Tensor::ones(out_node.value.shape()));
    let mut result = Gradients::default();

    for id in (0..=output.0).rev() {
        let Some(grad) = slots[id].take() else {
            continue;
        };
        let node = &graph.nodes[id];
        if !node.requires_grad {
            continue;
        }
        propagate(graph, node, &grad, &mut slots);
        if node.retain_grad || matches!(node.op, Op::Leaf) {
            result.grads.insert(id, grad);
        }
    }
    Ok(result)
}

/// Gradient buffer for node `id`, or `None` when it needs no gradient.
fn slot_for(graph: &Graph, slots: &mut [Option<Tensor>], id: usize) -> Option<Tensor> {
    let node = &graph.nodes[id];
    if !node.requires_grad {
        return None;
    }
    Some(
        slots[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
    )
}

fn accumulate(graph: &Graph, slots: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f64])) {
    if let Some(mut buf) = slot_for(graph, slots, id) {
        f(buf.data_mut());
        slots[id] = Some(buf);
    }
}

fn propagate(graph: &Graph, node: &Node, grad: &Tensor, slots: &mut [Option<Tensor>]) {
    let dy = grad.data();
    let val = |id: usize| graph.nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            window,
            out_channels,
        } => {
            let batch = graph.nodes[*input].value.shape()[0];
            let mut gi = slot_for(graph, slots, *input);
            let mut gk = slot_for(graph, slots, *kernel);
            let mut gb = bias.and_then(|b| slot_for(graph, slots, b));
            kernels::conv2d_backward(
                val(*input),
                batch,
                window,
                val(*kernel),
                *out_channels,
                dy,
                gi.as_mut().map(|t| t.data_mut()),
                gk.as_mut().map(|t| t.data_mut()),
                gb.as_mut().map(|t| t.data_mut()),
            );
            slots[*input] = gi.or(slots[*input].take());
            slots[*kernel] = gk.or(slots[*kernel].take());
            if let Some(b) = bias {
                slots[*b] = gb.or(slots[*b].take());
            }
        }
        Op::ConvTranspose2d {
            input,
            kernel,
            window,
            in_channels,
        } => {
            let batch = graph.nodes[*input].value.shape()[0];
            let mut gi = slot_for(graph, slots, *input);
            let mut gk = slot_for(graph, slots, *kernel);
            kernels::conv_transpose2d_backward(
                val(*input),
                batch,
                *in_channels,
                window,
                val(*kernel),
                dy,
                gi.as_mut().map(|t| t.data_mut()),
                gk.as_mut().map(|t| t.data_mut()),
            );
            slots[*input] = gi.or(slots[*input].take());
            slots[*kernel] = gk.or(slots[*kernel].take());
        }
        Op::MaxPool { input, argmax } => accumulate(graph, slots, *input, |g| {
            for (o, &src) in argmax.iter().enumerate() {
                g[src] += dy[o];
            }
        }),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let shape = graph.nodes[*input].value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for bn in 0..n {
                for ch in 0..c {
                    let off = (bn * c + ch) * plane;
                    for i in off..off + plane {
                        sum_dy[ch] += dy[i];
                        sum_dy_xhat[ch] += dy[i] * xhat[i];
                    }
                }
            }
            accumulate(graph, slots, *gamma, |g| {
                for ch in 0..c {
                    g[ch] += sum_dy_xhat[ch];
                }
            });
            accumulate(graph, slots, *beta, |g| {
                for ch in 0..c {
                    g[ch] += sum_dy[ch];
                }
            });
            let gam = val(*gamma);
            let count = (n * plane) as f64;
            accumulate(graph, slots, *input, |g| {
                for bn in 0..n {
                    for ch in 0..c {
                        let off = (bn * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch];
                        match mode {
                            Mode::Eval => {
                                for i in off..off + plane {
                                    g[i] += k * dy[i];
                                }
                            }
                            Mode::Train => {
                                let (mdy, mdyx) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                                for i in off..off + plane {
                                    g[i] += k * (dy[i] - mdy - xhat[i] * mdyx);
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Relu(a) => {
            let y = node.value.data();
            accumulate(graph, slots, *a, |g| {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(graph, slots, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            })
        }
        Op::Scale(a, s) => accumulate(graph, slots, *a, |g| {
            for i in 0..g.len() {
                g[i] += dy[i] * s;
            }
        }),
        Op::Add(a, b) => {
            for id in [*a, *b] {
                accumulate(graph, slots, id, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i];
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(graph, slots, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * vb[i];
                }
            });
            accumulate(graph, slots, *b, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * va[i];
                }
            });
        }
        Op::Concat(a, b) => {
            let sa = graph.nodes[*a].value.shape();
            let sb = graph.nodes[*b].value.shape();
            let (n, plane) = (sa[0], sa[2] * sa[3]);
            let (la, lb) = (sa[1] * plane, sb[1] * plane);
            accumulate(graph, slots, *a, |g| {
                for i in 0..n {
                    let src = &dy[i * (la + lb)..i * (la + lb) + la];
                    for (d, s) in g[i * la..(i + 1) * la].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
            accumulate(graph, slots, *b, |g| {
                for i in 0..n {
                    let src = &dy[i * (la + lb) + la..(i + 1) * (la + lb)];
                    for (d, s) in g[i * lb..(i + 1) * lb].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        Op::ChannelGate { gate, input } => {
            let shape = graph.nodes[*input].value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let (gv, xv) = (val(*gate), val(*input));
            accumulate(graph, slots, *gate, |g| {
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for j in 0..plane {
                            g[i * plane + j] += dy[off + j] * xv[off + j];
                        }
                    }
                }
            });
            accumulate(graph, slots, *input, |g| {
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for j in 0..plane {
                            g[off + j] += dy[off + j] * gv[i * plane + j];
                        }
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(graph, slots, *a, |g| {
            for v in g.iter_mut() {
                *v += dy[0];
            }
        }),
        Op::Mean(a) => accumulate(graph, slots, *a, |g| {
            let s = dy[0] / g.len() as f64;
            for v in g.iter_mut() {
                *v += s;
            }
        }),
        Op::MaskedSum { input, mask } => accumulate(graph, slots, *input, |g| {
            for (v, &m) in g.iter_mut().zip(mask) {
                if m {
                    *v += dy[0];
                }
            }
        }),
        Op::Loss { pred, target, loss } => {
            let p = val(*pred);
            let s = dy[0] / p.len() as f64;
            accumulate(graph, slots, *pred, |g| {
                for i in 0..g.len() {
                    g[i] += s * loss.derivative(p[i], target[i]);
                }
            });
        }
    }
}
