//! A small trainable image classifier: two-conv CNN or one-hidden-layer MLP,
//! softmax output, cross-entropy loss, plain mini-batch SGD with L2 decay.
//!
//! All parameters live in one flat vector (`theta`) described by a layout
//! table, so models can be averaged elementwise and checkpointed as raw
//! floats.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::image::StandardizedImage;
use crate::seed;

const CONV1_FILTERS: usize = 16;
const CONV2_FILTERS: usize = 32;
const KERNEL: usize = 3;
const CNN_HIDDEN: usize = 128;
/// Floor inside `ln` for the cross-entropy loss.
pub const LOG_EPS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// conv3×3×16 → relu → maxpool2 → conv3×3×32 → relu → maxpool2 →
    /// dense(128) → relu → dense.
    SmallCnn,
    /// dense(hidden) → relu → dense.
    Mlp { hidden: usize },
}

/// Architecture descriptor: layer family plus input shape and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchId {
    pub kind: ArchKind,
    pub input: (usize, usize, usize),
    pub n_cls: usize,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::SmallCnn => f.write_str("cnn"),
            ArchKind::Mlp { hidden } => write!(f, "mlp{hidden}"),
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    /// `cnn`, `mlp` (64 hidden units) or `mlp<N>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" | "small-cnn" => Ok(ArchKind::SmallCnn),
            "mlp" => Ok(ArchKind::Mlp { hidden: 64 }),
            other => other
                .strip_prefix("mlp")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| *n > 0)
                .map(|hidden| ArchKind::Mlp { hidden })
                .ok_or_else(|| invalid_arg!("unknown architecture '{other}'")),
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w, c) = self.input;
        write!(f, "{}:{h}x{w}x{c}:{}", self.kind, self.n_cls)
    }
}

/// One named parameter block of `theta`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct CnnDims {
    c: usize,
    h0: usize,
    w0: usize,
    h1: usize,
    w1: usize,
    p1h: usize,
    p1w: usize,
    h2: usize,
    w2: usize,
    p2h: usize,
    p2w: usize,
}

impl CnnDims {
    fn new((h, w, c): (usize, usize, usize)) -> Result<Self> {
        let valid = |n: usize| n.checked_sub(KERNEL - 1);
        let shrink = || invalid_arg!("input {h}x{w} too small for the CNN");
        let h1 = valid(h).ok_or_else(shrink)?;
        let w1 = valid(w).ok_or_else(shrink)?;
        let (p1h, p1w) = (h1 / 2, w1 / 2);
        let h2 = valid(p1h).ok_or_else(shrink)?;
        let w2 = valid(p1w).ok_or_else(shrink)?;
        let (p2h, p2w) = (h2 / 2, w2 / 2);
        if p2h == 0 || p2w == 0 {
            return Err(shrink());
        }
        Ok(Self { c, h0: h, w0: w, h1, w1, p1h, p1w, h2, w2, p2h, p2w })
    }

    fn flat(&self) -> usize {
        CONV2_FILTERS * self.p2h * self.p2w
    }
}

impl ArchId {
    pub fn new(kind: ArchKind, input: (usize, usize, usize), n_cls: usize) -> Result<Self> {
        if n_cls < 2 {
            return Err(invalid_arg!("classifier needs at least 2 classes, got {n_cls}"));
        }
        let (h, w, c) = input;
        if h == 0 || w == 0 || c == 0 {
            return Err(invalid_arg!("invalid input shape {h}x{w}x{c}"));
        }
        if let ArchKind::SmallCnn = kind {
            CnnDims::new(input)?;
        }
        Ok(Self { kind, input, n_cls })
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn layout(&self) -> Vec<LayerSpec> {
        let blocks: Vec<(&str, Vec<usize>)> = match self.kind {
            ArchKind::SmallCnn => {
                let d = CnnDims::new(self.input).expect("validated at construction");
                vec![
                    ("conv1.weight", vec![CONV1_FILTERS, d.c, KERNEL, KERNEL]),
                    ("conv1.bias", vec![CONV1_FILTERS]),
                    ("conv2.weight", vec![CONV2_FILTERS, CONV1_FILTERS, KERNEL, KERNEL]),
                    ("conv2.bias", vec![CONV2_FILTERS]),
                    ("fc1.weight", vec![CNN_HIDDEN, d.flat()]),
                    ("fc1.bias", vec![CNN_HIDDEN]),
                    ("fc2.weight", vec![self.n_cls, CNN_HIDDEN]),
                    ("fc2.bias", vec![self.n_cls]),
                ]
            }
            ArchKind::Mlp { hidden } => vec![
                ("fc1.weight", vec![hidden, self.input_len()]),
                ("fc1.bias", vec![hidden]),
                ("fc2.weight", vec![self.n_cls, hidden]),
                ("fc2.bias", vec![self.n_cls]),
            ],
        };
        let mut offset = 0;
        blocks
            .into_iter()
            .map(|(name, shape)| {
                let spec = LayerSpec { name: name.to_string(), offset, shape };
                offset += spec.len();
                spec
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerSpec::len).sum()
    }
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: ArchId,
    theta: Vec<f64>,
    layout: Vec<LayerSpec>,
}

impl ModelParams {
    pub fn from_theta(arch: ArchId, theta: Vec<f64>) -> Result<Self> {
        let layout = arch.layout();
        let expected: usize = layout.iter().map(LayerSpec::len).sum();
        if theta.len() != expected {
            return Err(invalid_arg!(
                "{arch} needs {expected} parameters, got {}",
                theta.len()
            ));
        }
        Ok(Self { arch, theta, layout })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn layout(&self) -> &[LayerSpec] {
        &self.layout
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layout.iter().find(|l| l.name == name)
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.theta.iter().map(|t| t * t).sum())
    }

    fn block(&self, i: usize) -> &[f64] {
        &self.theta[self.layout[i].range()]
    }
}

/// Deterministic He-uniform initialisation: weights `U(±sqrt(6 / fan_in))`,
/// biases zero.
pub fn init_model(kind: ArchKind, input: (usize, usize, usize), n_cls: usize, seed: u64) -> Result<ModelParams> {
    let arch = ArchId::new(kind, input, n_cls)?;
    let layout = arch.layout();
    let mut rng = seed::rng(seed);
    let mut theta = vec![0.0; layout.iter().map(LayerSpec::len).sum()];
    for spec in &layout {
        if spec.name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = spec.shape[1..].iter().product();
        let bound = libm::sqrt(6.0 / fan_in as f64);
        for t in &mut theta[spec.range()] {
            *t = rng.random_range(-bound..bound);
        }
    }
    Ok(ModelParams { arch, theta, layout })
}

/// Softmax output over the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionVector {
    probs: Vec<f64>,
}

impl PredictionVector {
    /// Validates non-negativity and `Σ = 1 ± 1e-6`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid_arg!("probabilities must be non-empty and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if libm::fabs(s - 1.0) > 1e-6 {
            return Err(invalid_arg!("probabilities sum to {s}, not 1"));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits) }
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_cls(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; lowest index wins ties.
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if *p > self.probs[best] { i } else { best })
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - m)).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Cached activations of one CNN forward pass.
struct CnnTrace {
    x: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    arg2: Vec<usize>,
    hidden: Vec<f64>,
}

struct MlpTrace {
    x: Vec<f64>,
    hidden: Vec<f64>,
}

enum Trace {
    Cnn(CnnTrace),
    Mlp(MlpTrace),
}

/// HWC → CHW.
fn to_planar(data: &[f64], (h, w, c): (usize, usize, usize)) -> Vec<f64> {
    if c == 1 {
        return data.to_vec();
    }
    let mut out = vec![0.0; data.len()];
    for (i, px) in data.chunks_exact(c).enumerate() {
        for (k, v) in px.iter().enumerate() {
            out[k * h * w + i] = *v;
        }
    }
    out
}

/// Valid 3×3 convolution, stride 1, followed by ReLU. Planar layout.
fn conv_relu(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
) -> Vec<f64> {
    let (oh, ow) = (in_h - 2, in_w - 2);
    let mut out = vec![0.0; out_c * oh * ow];
    for f in 0..out_c {
        let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[f]);
        for c in 0..in_c {
            let src = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
            for ki in 0..KERNEL {
                for kj in 0..KERNEL {
                    let wv = weight[((f * in_c + c) * KERNEL + ki) * KERNEL + kj];
                    for i in 0..oh {
                        let row = &src[(i + ki) * in_w + kj..(i + ki) * in_w + kj + ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        plane.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// 2×2 max pool (floor), recording the flat source index of each maximum.
fn max_pool(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut arg = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ph {
            for j in 0..pw {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn dense(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(k, b)| {
            let row = &weight[k * n_in..(k + 1) * n_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn forward(model: &ModelParams, img: &StandardizedImage) -> Result<(Vec<f64>, Trace)> {
    let arch = model.arch;
    if img.shape() != arch.input {
        return Err(invalid_arg!(
            "input shape {:?} does not match architecture {arch}",
            img.shape()
        ));
    }
    match arch.kind {
        ArchKind::SmallCnn => {
            let d = CnnDims::new(arch.input)?;
            let x = to_planar(img.data(), arch.input);
            let a1 = conv_relu(&x, d.c, d.h0, d.w0, model.block(0), model.block(1), CONV1_FILTERS);
            let (p1, arg1) = max_pool(&a1, CONV1_FILTERS, d.h1, d.w1);
            let a2 = conv_relu(&p1, CONV1_FILTERS, d.p1h, d.p1w, model.block(2), model.block(3), CONV2_FILTERS);
            let (p2, arg2) = max_pool(&a2, CONV2_FILTERS, d.h2, d.w2);
            let mut hidden = dense(&p2, model.block(4), model.block(5));
            hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            let logits = dense(&hidden, model.block(6), model.block(7));
            Ok((logits, Trace::Cnn(CnnTrace { x, a1, p1, arg1, a2, p2, arg2, hidden })))
        }
        ArchKind::Mlp { .. } => {
            let x = img.data().to_vec();
            let mut hidden = dense(&x, model.block(0), model.block(1));
            hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            let logits = dense(&hidden, model.block(2), model.block(3));
            Ok((logits, Trace::Mlp(MlpTrace { x, hidden })))
        }
    }
}

/// Accumulates `dW += g ⊗ x`, `db += g` and returns `Wᵀ g`.
fn dense_backward(
    g: &[f64],
    input: &[f64],
    weight: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let n_in = input.len();
    let mut dx = if need_input_grad { vec![0.0; n_in] } else { Vec::new() };
    for (k, gk) in g.iter().enumerate() {
        db[k] += gk;
        let row = &mut dw[k * n_in..(k + 1) * n_in];
        for (r, x) in row.iter_mut().zip(input) {
            *r += gk * x;
        }
        if need_input_grad {
            let wrow = &weight[k * n_in..(k + 1) * n_in];
            for (d, w) in dx.iter_mut().zip(wrow) {
                *d += gk * w;
            }
        }
    }
    dx
}

/// Backward pass of [`conv_relu`] given the gradient w.r.t. its (post-ReLU)
/// output. Returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    grad_out: &mut [f64],
    activ: &[f64],
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    out_c: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    let (oh, ow) = (in_h - 2, in_w - 2);
    for (g, a) in grad_out.iter_mut().zip(activ) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dx = if need_input_grad { vec![0.0; in_c * in_h * in_w] } else { Vec::new() };
    for f in 0..out_c {
        let gplane = &grad_out[f * oh * ow..(f + 1) * oh * ow];
        db[f] += gplane.iter().sum::<f64>();
        for c in 0..in_c {
            let src = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
            for ki in 0..KERNEL {
                for kj in 0..KERNEL {
                    let widx = ((f * in_c + c) * KERNEL + ki) * KERNEL + kj;
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let row = &src[(i + ki) * in_w + kj..(i + ki) * in_w + kj + ow];
                        let grow = &gplane[i * ow..(i + 1) * ow];
                        acc += row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[widx] += acc;
                    if need_input_grad {
                        let wv = weight[widx];
                        let dplane = &mut dx[c * in_h * in_w..(c + 1) * in_h * in_w];
                        for i in 0..oh {
                            let grow = &gplane[i * ow..(i + 1) * ow];
                            let drow = &mut dplane[(i + ki) * in_w + kj..(i + ki) * in_w + kj + ow];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adds the gradient of the cross-entropy loss of one sample to `grad` and
/// returns the loss.
fn accumulate_gradient(model: &ModelParams, img: &StandardizedImage, label: usize, grad: &mut [f64]) -> Result<f64> {
    let (logits, trace) = forward(model, img)?;
    let probs = softmax(&logits);
    let loss = -libm::log(probs[label].max(LOG_EPS));
    let mut g = probs;
    g[label] -= 1.0;
    let layout = &model.layout;
    let (r0, r1, r2, r3) = (layout[0].range(), layout[1].range(), layout[2].range(), layout[3].range());
    match trace {
        Trace::Cnn(t) => {
            let d = CnnDims::new(model.arch.input)?;
            let (r4, r5, r6, r7) = (layout[4].range(), layout[5].range(), layout[6].range(), layout[7].range());
            let (head, tail) = grad.split_at_mut(r4.start);
            let (fc1, fc2) = tail.split_at_mut(r6.start - r4.start);
            let (dw_fc2, db_fc2) = fc2.split_at_mut(r7.start - r6.start);
            let mut dh = dense_backward(&g, &t.hidden, model.block(6), dw_fc2, db_fc2, true);
            for (d, h) in dh.iter_mut().zip(&t.hidden) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw_fc1, db_fc1) = fc1.split_at_mut(r5.start - r4.start);
            let dp2 = dense_backward(&dh, &t.p2, model.block(4), dw_fc1, db_fc1, true);
            let mut da2 = vec![0.0; t.a2.len()];
            for (gv, idx) in dp2.iter().zip(&t.arg2) {
                da2[*idx] += gv;
            }
            let (g01, g23) = head.split_at_mut(r2.start);
            let (dw2, db2) = g23.split_at_mut(r3.start - r2.start);
            let dp1 = conv_backward(
                &mut da2, &t.a2, &t.p1, CONV1_FILTERS, d.p1h, d.p1w,
                model.block(2), dw2, db2, CONV2_FILTERS, true,
            );
            let mut da1 = vec![0.0; t.a1.len()];
            for (gv, idx) in dp1.iter().zip(&t.arg1) {
                da1[*idx] += gv;
            }
            let (dw1, db1) = g01.split_at_mut(r1.start - r0.start);
            conv_backward(
                &mut da1, &t.a1, &t.x, d.c, d.h0, d.w0,
                model.block(0), dw1, &mut db1[..r1.len()], CONV1_FILTERS, false,
            );
        }
        Trace::Mlp(t) => {
            let (head, tail) = grad.split_at_mut(r2.start);
            let (dw2, db2) = tail.split_at_mut(r3.start - r2.start);
            let mut dh = dense_backward(&g, &t.hidden, model.block(2), dw2, db2, true);
            for (d, h) in dh.iter_mut().zip(&t.hidden) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw1, db1) = head.split_at_mut(r1.start);
            dense_backward(&dh, &t.x, model.block(0), dw1, db1, false);
        }
    }
    Ok(loss)
}

/// Mean cross-entropy plus `(weight_decay / 2)·|θ|²` over a batch, and its
/// gradient with respect to `theta`.
pub fn loss_and_gradient(
    model: &ModelParams,
    inputs: &[&StandardizedImage],
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(invalid_arg!("batch needs matching non-empty inputs and labels"));
    }
    let mut grad = vec![0.0; model.theta.len()];
    let mut loss = 0.0;
    for (img, &y) in inputs.iter().zip(labels) {
        if y >= model.arch.n_cls {
            return Err(invalid_arg!("label {y} out of range"));
        }
        loss += accumulate_gradient(model, img, y, &mut grad)?;
    }
    let n = inputs.len() as f64;
    loss /= n;
    let mut sq = 0.0;
    for (g, t) in grad.iter_mut().zip(&model.theta) {
        *g = *g / n + weight_decay * t;
        sq += t * t;
    }
    Ok((loss + 0.5 * weight_decay * sq, grad))
}

pub fn predict(model: &ModelParams, img: &StandardizedImage) -> Result<PredictionVector> {
    let (logits, _) = forward(model, img)?;
    Ok(PredictionVector::from_logits(&logits))
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(model: &ModelParams, inputs: &[StandardizedImage], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (img, y) in inputs.iter().zip(labels) {
        if predict(model, img)?.argmax() == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 coefficient; the loss gains `(weight_decay / 2)·|θ|²`.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, learning_rate: 0.05, weight_decay: 0.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid_arg!("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid_arg!("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Mini-batch SGD. Sample order per epoch comes from a ChaCha stream seeded
/// with `cfg.seed`, so training is bit-reproducible.
pub fn train_local(
    model: &ModelParams,
    inputs: &[StandardizedImage],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(invalid_arg!(
            "training needs a non-empty labelled dataset ({} inputs, {} labels)",
            inputs.len(),
            labels.len()
        ));
    }
    let mut model = model.clone();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&StandardizedImage> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grad) = loss_and_gradient(&model, &xs, &ys, cfg.weight_decay)?;
            for (t, g) in model.theta.iter_mut().zip(&grad) {
                *t -= cfg.learning_rate * g;
            }
        }
    }
    Ok(model)
}

/// Elementwise mean of `theta` across models of one architecture.
pub fn average_models(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| invalid_arg!("nothing to average"))?;
    if let Some(m) = models.iter().find(|m| m.arch != first.arch) {
        return Err(invalid_arg!("cannot average {} with {}", first.arch, m.arch));
    }
    let n = models.len() as f64;
    let mut theta = vec![0.0; first.theta.len()];
    for m in models {
        for (t, v) in theta.iter_mut().zip(&m.theta) {
            *t += v;
        }
    }
    theta.iter_mut().for_each(|t| *t /= n);
    Ok(ModelParams { arch: first.arch, theta, layout: first.layout.clone() })
}

impl fmt::Display for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} parameters)", self.arch, self.theta.len())
    }
}

/// Formats a layout table for logs.
pub fn describe_layout(layout: &[LayerSpec]) -> String {
    layout
        .iter()
        .map(|l| format!("{} {:?} @{}", l.name, l.shape, l.offset))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;
    use crate::image::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn std_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> StandardizedImage {
        let d = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        Normalizer::identity(c).apply(&Image::new(h, w, c, d).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ArchKind::SmallCnn, (12, 12, 1), 10, 1).unwrap();
        let b = init_model(ArchKind::SmallCnn, (12, 12, 1), 10, 1).unwrap();
        let c = init_model(ArchKind::SmallCnn, (12, 12, 1), 10, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta(), c.theta());
        assert_eq!(a.layer("fc2.bias").unwrap().shape, vec![10]);
        assert_eq!(a.theta().len(), a.arch().param_count());
    }

    #[test]
    fn unknown_or_unsupported_arch() {
        assert!("resnet".parse::<ArchKind>().is_err());
        assert_eq!("mlp32".parse::<ArchKind>().unwrap(), ArchKind::Mlp { hidden: 32 });
        assert!(init_model(ArchKind::SmallCnn, (6, 6, 1), 10, 0).is_err());
        assert!(init_model(ArchKind::Mlp { hidden: 4 }, (2, 2, 1), 1, 0).is_err());
    }

    #[test]
    fn cnn_layout_for_28x28() {
        let m = init_model(ArchKind::SmallCnn, (28, 28, 1), 10, 0).unwrap();
        assert_eq!(m.layer("fc1.weight").unwrap().shape, vec![128, 32 * 5 * 5]);
        let m = init_model(ArchKind::SmallCnn, (32, 32, 3), 10, 0).unwrap();
        assert_eq!(m.layer("conv1.weight").unwrap().shape, vec![16, 3, 3, 3]);
        assert_eq!(m.layer("fc1.weight").unwrap().shape, vec![128, 32 * 6 * 6]);
    }

    #[test]
    fn predictions_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = init_model(ArchKind::SmallCnn, (14, 14, 3), 7, 3).unwrap();
        for _ in 0..5 {
            let p = predict(&m, &std_image(14, 14, 3, &mut rng)).unwrap();
            assert_eq!(p.n_cls(), 7);
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.probs().iter().all(|v| *v >= 0.0));
        }
        assert!(predict(&m, &std_image(14, 13, 3, &mut rng)).is_err());
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = init_model(ArchKind::SmallCnn, (12, 12, 1), 4, 3).unwrap();
        let w = m.layer("fc2.weight").unwrap().range();
        let b = m.layer("fc2.bias").unwrap().range();
        m.theta_mut()[w].iter_mut().for_each(|v| *v = 0.0);
        m.theta_mut()[b].iter_mut().for_each(|v| *v = 0.0);
        let p = predict(&m, &std_image(12, 12, 1, &mut rng)).unwrap();
        assert!(p.probs().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn averaging_cases() {
        let arch = ArchId::new(ArchKind::Mlp { hidden: 1 }, (1, 1, 1), 2).unwrap();
        assert_eq!(arch.param_count(), 6);
        let a = ModelParams::from_theta(arch, vec![1.0, 3.0, 1.0, 3.0, 1.0, 3.0]).unwrap();
        let b = ModelParams::from_theta(arch, vec![3.0, 5.0, 3.0, 5.0, 3.0, 5.0]).unwrap();
        let avg = average_models(&[&a, &b]).unwrap();
        assert_eq!(avg.theta(), &[2.0, 4.0, 2.0, 4.0, 2.0, 4.0]);
        assert_eq!(average_models(&[&a]).unwrap(), a);
        let neg = ModelParams::from_theta(arch, a.theta().iter().map(|v| -v).collect()).unwrap();
        assert!(average_models(&[&a, &neg]).unwrap().theta().iter().all(|v| *v == 0.0));

        let other = init_model(ArchKind::Mlp { hidden: 2 }, (1, 1, 1), 2, 0).unwrap();
        assert!(average_models(&[&a, &other]).is_err());
        assert!(average_models(&[]).is_err());
        assert!(ModelParams::from_theta(arch, vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_epochs_is_identity_and_empty_data_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = init_model(ArchKind::Mlp { hidden: 8 }, (3, 3, 1), 2, 0).unwrap();
        let xs = vec![std_image(3, 3, 1, &mut rng)];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert_eq!(train_local(&m, &xs, &[1], &cfg).unwrap(), m);
        assert!(train_local(&m, &[], &[], &TrainConfig::default()).is_err());
    }

    fn toy_set(n: usize, seed: u64) -> (Vec<StandardizedImage>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normalizer::identity(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let d: Vec<f64> = (0..16)
                .map(|k| {
                    let base = if (k < 8) == (y == 0) { 0.8 } else { 0.2 };
                    (base + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0)
                })
                .collect();
            xs.push(norm.apply(&Image::new(4, 4, 1, d).unwrap()).unwrap());
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (xs, ys) = toy_set(200, 9);
        let m = init_model(ArchKind::Mlp { hidden: 16 }, (4, 4, 1), 2, 4).unwrap();
        let cfg = TrainConfig { epochs: 20, batch_size: 16, learning_rate: 0.1, weight_decay: 0.0, seed: 2 };
        let trained = train_local(&m, &xs, &ys, &cfg).unwrap();
        assert!(accuracy(&trained, &xs, &ys).unwrap() >= 0.95);
        assert_eq!(train_local(&m, &xs, &ys, &cfg).unwrap(), trained);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let (xs, ys) = toy_set(100, 3);
        let m = init_model(ArchKind::Mlp { hidden: 16 }, (4, 4, 1), 2, 4).unwrap();
        let base = TrainConfig { epochs: 5, batch_size: 10, learning_rate: 0.05, weight_decay: 0.0, seed: 1 };
        let plain = train_local(&m, &xs, &ys, &base).unwrap();
        let decayed = train_local(&m, &xs, &ys, &TrainConfig { weight_decay: 10.0, learning_rate: 0.01, ..base }).unwrap();
        assert!(decayed.l2_norm() < plain.l2_norm());
    }
}
