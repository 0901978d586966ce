//! A small convolutional network with hand-written reverse-mode gradients.
//!
//! Samples are processed independently; batch results are reduced in sample
//! order so outputs and gradients are bit-identical at any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Structure(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Structure(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Row `i` along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let stride = (self.data.len() / self.shape.first().copied().unwrap_or(1).max(1)).max(1);
        self.data.chunks(stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    fn param_sizes(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (out_ch * in_ch * kernel * kernel, out_ch),
            LayerSpec::Linear { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or `None` when incompatible.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match (*self, input) {
            (
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                },
                &[c, h, w],
            ) => {
                if c != in_ch || stride == 0 || kernel == 0 {
                    return None;
                }
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                if hp < kernel || wp < kernel {
                    return None;
                }
                Some(vec![out_ch, (hp - kernel) / stride + 1, (wp - kernel) / stride + 1])
            }
            (LayerSpec::MaxPool2d { kernel, stride }, &[c, h, w]) => {
                if stride == 0 || kernel == 0 || h < kernel || w < kernel {
                    return None;
                }
                Some(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            (LayerSpec::Relu, s) => Some(s.to_vec()),
            (LayerSpec::Flatten, s) => Some(vec![s.iter().product()]),
            (LayerSpec::Linear { inputs, outputs }, &[n]) if n == inputs => Some(vec![outputs]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Conv: `[out_ch, in_ch, k, k]`; Linear: `[outputs, inputs]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeroed(spec: LayerSpec) -> Self {
        let (w, b) = spec.param_sizes();
        Layer {
            spec,
            weight: vec![0.0; w],
            bias: vec![0.0; b],
        }
    }

    fn init_uniform(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = self.spec.fan_in();
        if fan_in == 0 {
            return;
        }
        let a = (1.0 / fan_in as f64).sqrt();
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = rng.gen_range(-a..a);
        }
    }

    pub fn has_params(&self) -> bool {
        !self.weight.is_empty()
    }
}

/// Channel widths and feature size of the compact architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![8, 16, 32],
            feature_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    feature_tap: usize,
    /// Output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

impl CnnModel {
    /// Assembles a model, checking that layer shapes chain, that the final
    /// layer is a Linear head and that the feature tap precedes it.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, feature_tap: usize) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = layer.spec.param_sizes();
            if layer.weight.len() != w || layer.bias.len() != b {
                return Err(Error::Structure(format!(
                    "layer {i} ({:?}) has {} weights / {} biases, expected {w} / {b}",
                    layer.spec,
                    layer.weight.len(),
                    layer.bias.len()
                )));
            }
            cur = layer.spec.output_shape(&cur).ok_or_else(|| {
                Error::Structure(format!(
                    "layer {i} ({:?}) cannot take input of shape {cur:?}",
                    layer.spec
                ))
            })?;
            shapes.push(cur.clone());
        }
        match layers.last() {
            Some(Layer {
                spec: LayerSpec::Linear { .. },
                ..
            }) => {}
            _ => return Err(Error::Structure("model must end in a Linear head".into())),
        }
        if feature_tap + 1 >= layers.len() {
            return Err(Error::Structure(format!(
                "feature tap {feature_tap} must precede the head (layer {})",
                layers.len() - 1
            )));
        }
        if shapes[feature_tap].len() != 1 {
            return Err(Error::Structure(format!(
                "feature tap {feature_tap} output {:?} is not a vector",
                shapes[feature_tap]
            )));
        }
        Ok(CnnModel {
            input_shape,
            layers,
            feature_tap,
            shapes,
        })
    }

    /// Builds a model with every parameter drawn from
    /// `uniform(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    pub fn initialized(
        input_shape: [usize; 3],
        specs: &[LayerSpec],
        feature_tap: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&s| {
                let mut l = Layer::zeroed(s);
                l.init_uniform(&mut rng);
                l
            })
            .collect();
        CnnModel::new(input_shape, layers, feature_tap)
    }

    /// Conv(3×3, pad 1) → ReLU → MaxPool(2) per channel width, then
    /// Linear → ReLU (the feature tap) and a Linear head to `classes` logits.
    pub fn compact(window: usize, classes: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        if classes == 0 || arch.feature_dim == 0 || arch.channels.contains(&0) {
            return Err(Error::InvalidConfig(
                "classes, feature_dim and channel widths must be positive".into(),
            ));
        }
        let mut specs = Vec::new();
        let mut in_ch = 1;
        let mut side = window;
        for &ch in &arch.channels {
            specs.push(LayerSpec::Conv2d {
                in_ch,
                out_ch: ch,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool2d {
                kernel: 2,
                stride: 2,
            });
            in_ch = ch;
            side /= 2;
        }
        if side == 0 {
            return Err(Error::InvalidConfig(format!(
                "window {window} too small for {} pooling stages",
                arch.channels.len()
            )));
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Linear {
            inputs: in_ch * side * side,
            outputs: arch.feature_dim,
        });
        specs.push(LayerSpec::Relu);
        let tap = specs.len() - 1;
        specs.push(LayerSpec::Linear {
            inputs: arch.feature_dim,
            outputs: classes,
        });
        CnnModel::initialized([1, window, window], &specs, tap, seed)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes[self.feature_tap][0]
    }

    pub fn classes(&self) -> usize {
        self.shapes[self.head_index()][0]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// SHA-256 over the parameters of layers in `range`.
    pub fn param_digest(&self, range: std::ops::Range<usize>) -> String {
        let mut h = Sha256::new();
        for l in &self.layers[range] {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let s = inputs.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Structure(format!(
                "input shape {s:?} does not match model input [B, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        if s[0] == 0 {
            return Err(Error::Structure("empty batch".into()));
        }
        Ok(s[0])
    }

    /// Forward pass over a `B × C × H × W` batch. With `record` set, every
    /// sample's activations are kept for [`CnnModel::backward`].
    pub fn forward(&self, inputs: &Tensor, record: bool) -> Result<ForwardOutput> {
        let batch = self.check_input(inputs)?;
        let per_sample: Vec<SampleForward> = (0..batch)
            .into_par_iter()
            .map(|i| self.forward_sample(inputs.row(i), record))
            .collect::<Result<_>>()?;
        let k = self.classes();
        let d = self.feature_dim();
        let mut logits = Vec::with_capacity(batch * k);
        let mut features = Vec::with_capacity(batch * d);
        let mut records = record.then(|| Vec::with_capacity(batch));
        for s in per_sample {
            logits.extend_from_slice(&s.logits);
            features.extend_from_slice(&s.features);
            if let (Some(rs), Some(r)) = (records.as_mut(), s.record) {
                rs.push(r);
            }
        }
        Ok(ForwardOutput {
            logits: Tensor::new(vec![batch, k], logits)?,
            features: Tensor::new(vec![batch, d], features)?,
            records,
        })
    }

    pub(crate) fn forward_sample(&self, x: &[f64], record: bool) -> Result<SampleForward> {
        debug_assert_eq!(x.len(), self.input_len());
        let mut cur = x.to_vec();
        let mut cur_shape: &[usize] = &self.input_shape;
        let mut rec = record.then(|| ActivationRecord {
            inputs: Vec::with_capacity(self.layers.len()),
            argmax: Vec::with_capacity(self.layers.len()),
        });
        let mut features = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, argmax) = layer_forward(layer, &cur, cur_shape, &self.shapes[i]);
            if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} produced {bad}")));
            }
            if let Some(r) = rec.as_mut() {
                r.inputs.push(std::mem::replace(&mut cur, out));
                r.argmax.push(argmax);
            } else {
                cur = out;
            }
            cur_shape = &self.shapes[i];
            if i == self.feature_tap {
                features = cur.clone();
            }
        }
        Ok(SampleForward {
            logits: cur,
            features,
            record: rec,
        })
    }

    /// Feature-tap output for one sample, without recording.
    pub fn features_of(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::Structure(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_len()
            )));
        }
        Ok(self.forward_sample(x, false)?.features)
    }

    /// Parameter gradients for upstream logit gradients `dlogits`, plus the
    /// input gradient attached to a copy of the batch. Requires a recorded
    /// forward pass.
    pub fn backward(&self, out: &ForwardOutput, dlogits: &Tensor) -> Result<(Gradients, Tensor)> {
        let records = out.records.as_ref().ok_or_else(|| {
            Error::State("backward called on a forward pass made without recording".into())
        })?;
        if dlogits.shape() != out.logits.shape() {
            return Err(Error::Structure(format!(
                "upstream gradient shape {:?} does not match logits {:?}",
                dlogits.shape(),
                out.logits.shape()
            )));
        }
        let per_sample: Vec<(Gradients, Vec<f64>)> = records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut g = Gradients::zeros_like(self);
                let dx = self.backward_sample(r, dlogits.row(i), ReluRule::Standard, Some(&mut g), None);
                (g, dx)
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        let mut input_data = Vec::with_capacity(records.len() * self.input_len());
        let mut input_grad = Vec::with_capacity(records.len() * self.input_len());
        for ((g, dx), r) in per_sample.into_iter().zip(records) {
            total.add_assign(&g);
            input_data.extend_from_slice(&r.inputs[0]);
            input_grad.extend(dx);
        }
        let mut shape = vec![records.len()];
        shape.extend_from_slice(&self.input_shape);
        let mut inputs = Tensor::new(shape, input_data)?;
        inputs.set_grad(input_grad)?;
        Ok((total, inputs))
    }

    /// Reverse pass for one recorded sample. Accumulates parameter gradients
    /// into `params` when given and returns the gradient w.r.t. the input.
    pub(crate) fn backward_sample(
        &self,
        rec: &ActivationRecord,
        dlogits: &[f64],
        rule: ReluRule,
        mut params: Option<&mut Gradients>,
        mut observer: Option<&mut dyn BackwardObserver>,
    ) -> Vec<f64> {
        let mut grad = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &rec.inputs[i];
            let in_shape: &[usize] = if i == 0 {
                &self.input_shape
            } else {
                &self.shapes[i - 1]
            };
            let pg = params.as_deref_mut().map(|p| &mut p.layers[i]);
            let next = match layer.spec {
                LayerSpec::Relu => {
                    let out: Vec<f64> = input
                        .iter()
                        .zip(&grad)
                        .map(|(&pre, &g)| rule.relu_backward(pre, g))
                        .collect();
                    if let Some(obs) = observer.as_deref_mut() {
                        obs.relu(i, input, &grad, &out);
                    }
                    out
                }
                LayerSpec::Flatten => grad,
                LayerSpec::MaxPool2d { .. } => {
                    let mut dx = vec![0.0; input.len()];
                    let idx = rec.argmax[i].as_ref().expect("pool argmax recorded");
                    for (&j, &g) in idx.iter().zip(&grad) {
                        dx[j as usize] += g;
                    }
                    dx
                }
                LayerSpec::Linear { inputs, outputs } => {
                    linear_backward(&layer.weight, input, &grad, inputs, outputs, pg)
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => conv_backward(
                    &layer.weight,
                    input,
                    &grad,
                    ConvGeom {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                        h: in_shape[1],
                        w: in_shape[2],
                        oh: self.shapes[i][1],
                        ow: self.shapes[i][2],
                    },
                    pg,
                ),
            };
            grad = next;
        }
        grad
    }
}

/// How a ReLU passes gradient backwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluRule {
    /// `g · 1{pre > 0}`
    Standard,
    /// `g · 1{pre > 0} · 1{g > 0}`
    Guided,
}

impl ReluRule {
    #[inline]
    fn relu_backward(self, pre: f64, g: f64) -> f64 {
        match self {
            ReluRule::Standard if pre > 0.0 => g,
            ReluRule::Guided if pre > 0.0 && g > 0.0 => g,
            _ => 0.0,
        }
    }
}

/// Hook for inspecting the signal at every ReLU during a reverse pass.
pub trait BackwardObserver {
    fn relu(&mut self, layer: usize, pre_activation: &[f64], incoming: &[f64], outgoing: &[f64]);
}

/// Activations of one sample: the input to every layer and, for max-pool
/// layers, the flat input index selected for each output.
#[derive(Clone, Debug)]
pub struct ActivationRecord {
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) argmax: Vec<Option<Vec<u32>>>,
}

impl ActivationRecord {
    /// Inputs seen by every ReLU layer, keyed by layer index.
    pub fn relu_pre_activations<'a>(
        &'a self,
        model: &'a CnnModel,
    ) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec == LayerSpec::Relu)
            .map(move |(i, _)| (i, self.inputs[i].as_slice()))
    }
}

pub(crate) struct SampleForward {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub record: Option<ActivationRecord>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Tensor,
    pub records: Option<Vec<ActivationRecord>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| ParamGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    fn matches(&self, model: &CnnModel) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

fn layer_forward(
    layer: &Layer,
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
) -> (Vec<f64>, Option<Vec<u32>>) {
    match layer.spec {
        LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), None),
        LayerSpec::Flatten => (x.to_vec(), None),
        LayerSpec::Linear { inputs, outputs } => {
            let mut y = layer.bias.clone();
            for (o, yo) in y.iter_mut().enumerate().take(outputs) {
                let row = &layer.weight[o * inputs..(o + 1) * inputs];
                *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
            (y, None)
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut y = Vec::with_capacity(c * oh * ow);
            let mut idx = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let j = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                if x[j] > best {
                                    best = x[j];
                                    best_at = j;
                                }
                            }
                        }
                        y.push(best);
                        idx.push(best_at as u32);
                    }
                }
            }
            (y, Some(idx))
        }
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            let g = ConvGeom {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                h: in_shape[1],
                w: in_shape[2],
                oh: out_shape[1],
                ow: out_shape[2],
            };
            (conv_forward(&layer.weight, &layer.bias, x, g), None)
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output index range along one axis whose input coordinate
    /// `o * stride + k - pad` falls inside `0..size`.
    #[inline]
    fn valid_range(&self, k: usize, size: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size - 1
        let hi_num = size as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = ((hi + 1).max(0) as usize).min(out);
        lo..hi.max(lo)
    }
}

fn conv_forward(weight: &[f64], bias: &[f64], x: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut y = vec![0.0; g.out_ch * plane];
    for oc in 0..g.out_ch {
        let out = &mut y[oc * plane..(oc + 1) * plane];
        out.fill(bias[oc]);
        for ic in 0..g.in_ch {
            let inp = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.kernel {
                let rows = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kernel {
                    let wv = weight[((oc * g.in_ch + ic) * g.kernel + ky) * g.kernel + kx];
                    let cols = g.valid_range(kx, g.w, g.ow);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &inp[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out[oy * g.ow..(oy + 1) * g.ow];
                        for ox in cols.clone() {
                            out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    g: ConvGeom,
    params: Option<&mut ParamGrad>,
) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut dx = vec![0.0; x.len()];
    let mut params = params;
    for oc in 0..g.out_ch {
        let dout = &dy[oc * plane..(oc + 1) * plane];
        if let Some(p) = params.as_deref_mut() {
            p.bias[oc] += dout.iter().sum::<f64>();
        }
        for ic in 0..g.in_ch {
            let base = ic * g.h * g.w;
            for ky in 0..g.kernel {
                let rows = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kernel {
                    let wi = ((oc * g.in_ch + ic) * g.kernel + ky) * g.kernel + kx;
                    let wv = weight[wi];
                    let cols = g.valid_range(kx, g.w, g.ow);
                    let mut dw = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_off = base + iy * g.w;
                        let d_row = &dout[oy * g.ow..(oy + 1) * g.ow];
                        for ox in cols.clone() {
                            let ix = row_off + ox * g.stride + kx - g.pad;
                            dw += d_row[ox] * x[ix];
                            dx[ix] += wv * d_row[ox];
                        }
                    }
                    if let Some(p) = params.as_deref_mut() {
                        p.weight[wi] += dw;
                    }
                }
            }
        }
    }
    dx
}

fn linear_backward(
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    inputs: usize,
    outputs: usize,
    params: Option<&mut ParamGrad>,
) -> Vec<f64> {
    let mut dx = vec![0.0; inputs];
    for o in 0..outputs {
        let row = &weight[o * inputs..(o + 1) * inputs];
        for (d, w) in dx.iter_mut().zip(row) {
            *d += w * dy[o];
        }
    }
    if let Some(p) = params {
        for o in 0..outputs {
            p.bias[o] += dy[o];
            let gw = &mut p.weight[o * inputs..(o + 1) * inputs];
            for (g, v) in gw.iter_mut().zip(x) {
                *g += dy[o] * v;
            }
        }
    }
    dx
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Structure(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Structure(format!(
            "label {bad} out of range for {} classes",
            s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// `−log softmax(z)[label]` using the log-sum-exp shift.
pub fn sample_cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = check_logits(logits, labels)?;
    let total: f64 = logits
        .rows()
        .zip(labels)
        .map(|(z, &l)| sample_cross_entropy(z, l))
        .sum();
    Ok(total / b as f64)
}

fn softmax_minus_onehot(z: &[f64], label: usize, scale: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter()
        .enumerate()
        .map(|(j, v)| (v / s - if j == label { 1.0 } else { 0.0 }) * scale)
        .collect()
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: `(softmax − onehot) / B`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = check_logits(logits, labels)?;
    let data = logits
        .rows()
        .zip(labels)
        .flat_map(|(z, &l)| softmax_minus_onehot(z, l, 1.0 / b as f64))
        .collect();
    Tensor::new(vec![b, k], data)
}

/// Mean cross-entropy of a batch and its parameter gradients, computed per
/// sample in parallel and reduced in sample order.
pub fn loss_and_gradients(
    model: &CnnModel,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    let batch = model.check_input(inputs)?;
    if labels.len() != batch {
        return Err(Error::Structure(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let k = model.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Structure(format!("label {bad} out of range for {k} classes")));
    }
    let scale = 1.0 / batch as f64;
    let per_sample: Vec<(f64, Gradients)> = (0..batch)
        .into_par_iter()
        .map(|i| {
            let fwd = model.forward_sample(inputs.row(i), true)?;
            let loss = sample_cross_entropy(&fwd.logits, labels[i]);
            let dz = softmax_minus_onehot(&fwd.logits, labels[i], scale);
            let mut g = Gradients::zeros_like(model);
            let rec = fwd.record.expect("recorded");
            model.backward_sample(&rec, &dz, ReluRule::Standard, Some(&mut g), None);
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss * scale, total))
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &CnnModel, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut CnnModel, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) || !self.velocity.matches(model) {
            return Err(Error::Structure(
                "gradient buffers do not match model parameters".into(),
            ));
        }
        for ((layer, g), v) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity.layers)
        {
            for ((p, gi), vi) in layer.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
            for ((p, gi), vi) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }

    /// Clears the momentum buffer of one layer.
    pub fn reset_layer(&mut self, layer: usize) {
        let v = &mut self.velocity.layers[layer];
        v.weight.fill(0.0);
        v.bias.fill(0.0);
    }
}

/// Redraws the head's weights and biases from `uniform(−a, a)`,
/// `a = sqrt(1/fan_in)`. Every other layer is left untouched.
pub fn reinit_head(model: &mut CnnModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = model.head_index();
    model.layers[head].init_uniform(&mut rng);
}

// ---------------------------------------------------------------------------
// Checkpoint

const CNN_MAGIC: &[u8; 8] = b"SXAICNN\0";
const CNN_VERSION: u32 = 1;

/// Upper bound on any single dimension read from a checkpoint.
const MAX_DIM: usize = 1 << 20;
const MAX_LAYERS: usize = 1024;

fn read_dim(r: &mut Reader<'_>) -> Result<usize> {
    let at = r.offset();
    let v = r.u32()? as usize;
    if v > MAX_DIM {
        return Err(Error::parse(format!("offset {at}"), format!("dimension {v} too large")));
    }
    Ok(v)
}

pub fn encode_checkpoint(model: &CnnModel) -> Vec<u8> {
    let mut w = Writer::new(CNN_MAGIC, CNN_VERSION);
    for d in model.input_shape {
        w.u32(d as u32);
    }
    w.u32(model.feature_tap as u32);
    w.u32(model.layers.len() as u32);
    for l in &model.layers {
        match l.spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                w.u8(0);
                for v in [in_ch, out_ch, kernel, stride, pad] {
                    w.u32(v as u32);
                }
            }
            LayerSpec::Relu => w.u8(1),
            LayerSpec::MaxPool2d { kernel, stride } => {
                w.u8(2);
                w.u32(kernel as u32);
                w.u32(stride as u32);
            }
            LayerSpec::Flatten => w.u8(3),
            LayerSpec::Linear { inputs, outputs } => {
                w.u8(4);
                w.u32(inputs as u32);
                w.u32(outputs as u32);
            }
        }
    }
    for l in model.layers.iter().filter(|l| l.has_params()) {
        w.f64s(&l.weight);
        w.f64s(&l.bias);
    }
    w.finish()
}

pub fn decode_checkpoint(data: &[u8]) -> Result<CnnModel> {
    let mut r = Reader::open(data, CNN_MAGIC, CNN_VERSION)?;
    let input_shape = [read_dim(&mut r)?, read_dim(&mut r)?, read_dim(&mut r)?];
    let feature_tap = read_dim(&mut r)?;
    let at = r.offset();
    let n_layers = r.u32()? as usize;
    if n_layers > MAX_LAYERS {
        return Err(Error::parse(format!("offset {at}"), format!("{n_layers} layers")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = r.offset();
        let spec = match r.u8()? {
            0 => LayerSpec::Conv2d {
                in_ch: read_dim(&mut r)?,
                out_ch: read_dim(&mut r)?,
                kernel: read_dim(&mut r)?,
                stride: read_dim(&mut r)?,
                pad: read_dim(&mut r)?,
            },
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool2d {
                kernel: read_dim(&mut r)?,
                stride: read_dim(&mut r)?,
            },
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Linear {
                inputs: read_dim(&mut r)?,
                outputs: read_dim(&mut r)?,
            },
            t => return Err(Error::parse(format!("offset {at}"), format!("unknown layer tag {t}"))),
        };
        specs.push(spec);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for spec in specs {
        let (nw, nb) = spec.param_sizes();
        let mut layer = Layer {
            spec,
            weight: Vec::new(),
            bias: Vec::new(),
        };
        if nw > 0 {
            layer.weight = r.f64s(nw)?;
            layer.bias = r.f64s(nb)?;
        }
        layers.push(layer);
    }
    r.finish()?;
    CnnModel::new(input_shape, layers, feature_tap)
}
