use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::loss::{loss, loss_gradient, LossKind};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

/// Height, width and channels of one activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping `size × size` max-pooling.
    MaxPool {
        size: usize,
    },
    /// Fully connected; flattens its input.
    Dense {
        width: usize,
    },
}

/// Input shape plus layer list. The last layer must be dense; its width is
/// the number of classes. Softmax lives in the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv 5×5×16 → relu → pool 2 → conv 5×5×32 → relu → pool 2 →
    /// dense 128 → relu → dense `classes`, on 28×28×1 inputs.
    pub fn mnist_default(classes: usize) -> Self {
        Self {
            input: Shape {
                height: 28,
                width: 28,
                channels: 1,
            },
            layers: vec![
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    filters: 32,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { width: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { width: classes },
            ],
        }
    }

    /// Activation shape after every layer; errors if the chain does not fit.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        if cur.is_empty() {
            return Err(invalid("architecture", "empty input shape"));
        }
        for spec in &self.layers {
            cur = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    if filters == 0 || kernel == 0 || stride == 0 || kernel > cur.height || kernel > cur.width {
                        return Err(invalid(
                            "architecture",
                            format!("conv {kernel}x{kernel} does not fit {cur:?}"),
                        ));
                    }
                    Shape {
                        height: (cur.height - kernel) / stride + 1,
                        width: (cur.width - kernel) / stride + 1,
                        channels: filters,
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size } => {
                    if size == 0 || size > cur.height || size > cur.width {
                        return Err(invalid("architecture", format!("pool {size} does not fit {cur:?}")));
                    }
                    Shape {
                        height: cur.height / size,
                        width: cur.width / size,
                        channels: cur.channels,
                    }
                }
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(invalid("architecture", "dense layer of width 0"));
                    }
                    Shape {
                        height: 1,
                        width: 1,
                        channels: width,
                    }
                }
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(shapes),
            _ => Err(invalid("architecture", "last layer must be dense")),
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { width }) => *width,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    /// Conv: `(kernel·kernel·in_channels) × filters`; dense: `inputs × outputs`.
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        input: Shape,
        output: Shape,
        kernel: usize,
        stride: usize,
        params: Params,
    },
    Relu,
    MaxPool {
        input: Shape,
        output: Shape,
        size: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        params: Params,
    },
}

#[derive(Debug, Clone)]
enum Cache {
    Conv { cols: Vec<f64> },
    Relu { output: Vec<f64> },
    MaxPool { argmax: Vec<u32> },
    Dense { input: Vec<f64> },
}

/// Intermediates of a batched forward pass, consumed by
/// [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    caches: Vec<Cache>,
    logits: Vec<f64>,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `batch × classes` logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Parameter gradients, one `(weights, bias)` entry per parametrized layer
/// in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) layers: Vec<Params>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }
}

/// Trained (or freshly initialized) classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
}

fn im2col(input: &[f64], batch: usize, inp: Shape, out: Shape, kernel: usize, stride: usize) -> Vec<f64> {
    let row_len = kernel * kernel * inp.channels;
    let span = kernel * inp.channels;
    let mut cols = vec![0.0; batch * out.height * out.width * row_len];
    let mut r = 0;
    for b in 0..batch {
        let sample = &input[b * inp.len()..(b + 1) * inp.len()];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let dst = &mut cols[r * row_len..(r + 1) * row_len];
                for ky in 0..kernel {
                    let start = ((oy * stride + ky) * inp.width + ox * stride) * inp.channels;
                    dst[ky * span..(ky + 1) * span].copy_from_slice(&sample[start..start + span]);
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], batch: usize, inp: Shape, out: Shape, kernel: usize, stride: usize) -> Vec<f64> {
    let row_len = kernel * kernel * inp.channels;
    let span = kernel * inp.channels;
    let mut dinput = vec![0.0; batch * inp.len()];
    let mut r = 0;
    for b in 0..batch {
        let sample = &mut dinput[b * inp.len()..(b + 1) * inp.len()];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let src = &dcols[r * row_len..(r + 1) * row_len];
                for ky in 0..kernel {
                    let start = ((oy * stride + ky) * inp.width + ox * stride) * inp.channels;
                    for (d, s) in sample[start..start + span]
                        .iter_mut()
                        .zip(&src[ky * span..(ky + 1) * span])
                    {
                        *d += s;
                    }
                }
                r += 1;
            }
        }
    }
    dinput
}

impl Model {
    /// He-normal weights (`std = √(2 / fan_in)`), zero biases.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        Self::build(arch, |fan_in, _| (2.0 / fan_in as f64).sqrt() * rng.standard_normal())
    }

    /// All weights and biases zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build(arch, |_, _| 0.0)
    }

    fn build(arch: Architecture, mut weight: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut cur = arch.input;
        for (spec, &next) in arch.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    let fan_in = kernel * kernel * cur.channels;
                    Layer::Conv {
                        input: cur,
                        output: next,
                        kernel,
                        stride,
                        params: Params {
                            weights: (0..fan_in * filters).map(|_| weight(fan_in, filters)).collect(),
                            bias: vec![0.0; filters],
                        },
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool {
                    input: cur,
                    output: next,
                    size,
                },
                LayerSpec::Dense { width } => {
                    let fan_in = cur.len();
                    Layer::Dense {
                        inputs: fan_in,
                        outputs: width,
                        params: Params {
                            weights: (0..fan_in * width).map(|_| weight(fan_in, width)).collect(),
                            bias: vec![0.0; width],
                        },
                    }
                }
            };
            layers.push(layer);
            cur = next;
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &Params> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { params, .. } | Layer::Dense { params, .. } => Some(params),
            _ => None,
        })
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Params> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv { params, .. } | Layer::Dense { params, .. } => Some(params),
            _ => None,
        })
    }

    /// Total number of trainable values.
    pub fn parameter_count(&self) -> usize {
        self.params().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// All parameters in layer order, weights before biases.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.parameter_count()),
                got: format!("{}", values.len()),
            });
        }
        let mut at = 0;
        for p in self.params_mut() {
            for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
                *v = values[at];
                at += 1;
            }
        }
        Ok(())
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let s = self.arch.input;
        if x.width() != s.width || x.height() != s.height || x.channels() != s.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", s.width, s.height, s.channels),
                got: x.shape_string(),
            });
        }
        Ok(())
    }

    /// Forward pass over `batch` inputs laid out back to back.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Trace> {
        if inputs.len() != batch * self.arch.input.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{batch} inputs of {} values", self.arch.input.len()),
                got: format!("{} values", inputs.len()),
            });
        }
        let mut act = inputs.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    input,
                    output,
                    kernel,
                    stride,
                    params,
                } => {
                    let cols = im2col(&act, batch, *input, *output, *kernel, *stride);
                    let rows = batch * output.height * output.width;
                    let f = output.channels;
                    let mut out = Vec::with_capacity(rows * f);
                    for _ in 0..rows {
                        out.extend_from_slice(&params.bias);
                    }
                    gemm(
                        rows,
                        kernel * kernel * input.channels,
                        f,
                        &cols,
                        false,
                        &params.weights,
                        false,
                        1.0,
                        &mut out,
                    );
                    caches.push(Cache::Conv { cols });
                    act = out;
                }
                Layer::Relu => {
                    for v in &mut act {
                        *v = v.max(0.0);
                    }
                    caches.push(Cache::Relu { output: act.clone() });
                }
                Layer::MaxPool { input, output, size } => {
                    let mut out = Vec::with_capacity(batch * output.len());
                    let mut argmax = Vec::with_capacity(batch * output.len());
                    let c = input.channels;
                    for b in 0..batch {
                        let base = b * input.len();
                        for oy in 0..output.height {
                            for ox in 0..output.width {
                                for ch in 0..c {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_i = 0;
                                    for dy in 0..*size {
                                        for dx in 0..*size {
                                            let i = base + ((oy * size + dy) * input.width + ox * size + dx) * c + ch;
                                            if act[i] > best {
                                                best = act[i];
                                                best_i = i;
                                            }
                                        }
                                    }
                                    out.push(best);
                                    argmax.push(best_i as u32);
                                }
                            }
                        }
                    }
                    caches.push(Cache::MaxPool { argmax });
                    act = out;
                }
                Layer::Dense {
                    inputs,
                    outputs,
                    params,
                } => {
                    let mut out = Vec::with_capacity(batch * outputs);
                    for _ in 0..batch {
                        out.extend_from_slice(&params.bias);
                    }
                    gemm(
                        batch,
                        *inputs,
                        *outputs,
                        &act,
                        false,
                        &params.weights,
                        false,
                        1.0,
                        &mut out,
                    );
                    caches.push(Cache::Dense { input: act });
                    act = out;
                }
            }
        }
        Ok(Trace {
            batch,
            caches,
            logits: act,
        })
    }

    /// Backpropagates `dlogits` (`batch × classes`). Returns parameter
    /// gradients when `param_grads` is set and the input gradient when
    /// `input_grad` is set.
    pub fn backward(
        &self,
        trace: Trace,
        dlogits: &[f64],
        param_grads: bool,
        input_grad: bool,
    ) -> Result<(Option<Gradients>, Option<Vec<f64>>)> {
        let batch = trace.batch;
        if dlogits.len() != trace.logits.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logit gradients", trace.logits.len()),
                got: format!("{}", dlogits.len()),
            });
        }
        let mut grad = dlogits.to_vec();
        let mut grads: Vec<Params> = Vec::new();
        let last_needed = if input_grad { 0 } else { self.first_param_layer() };
        for (idx, (layer, cache)) in self.layers.iter().zip(trace.caches).enumerate().rev() {
            let need_input = idx > last_needed || (idx == 0 && input_grad);
            match (layer, cache) {
                (
                    Layer::Conv {
                        input,
                        output,
                        kernel,
                        stride,
                        params,
                    },
                    Cache::Conv { cols },
                ) => {
                    let rows = batch * output.height * output.width;
                    let f = output.channels;
                    let row_len = kernel * kernel * input.channels;
                    if param_grads {
                        let mut dw = vec![0.0; row_len * f];
                        gemm(row_len, rows, f, &cols, true, &grad, false, 0.0, &mut dw);
                        let mut db = vec![0.0; f];
                        for row in grad.chunks_exact(f) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        grads.push(Params { weights: dw, bias: db });
                    }
                    if need_input {
                        let mut dcols = vec![0.0; rows * row_len];
                        gemm(rows, f, row_len, &grad, false, &params.weights, true, 0.0, &mut dcols);
                        grad = col2im(&dcols, batch, *input, *output, *kernel, *stride);
                    }
                }
                (Layer::Relu, Cache::Relu { output }) => {
                    for (g, o) in grad.iter_mut().zip(&output) {
                        if *o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                (Layer::MaxPool { input, .. }, Cache::MaxPool { argmax }) => {
                    let mut dinput = vec![0.0; batch * input.len()];
                    for (g, &i) in grad.iter().zip(&argmax) {
                        dinput[i as usize] += g;
                    }
                    grad = dinput;
                }
                (
                    Layer::Dense {
                        inputs,
                        outputs,
                        params,
                    },
                    Cache::Dense { input },
                ) => {
                    if param_grads {
                        let mut dw = vec![0.0; inputs * outputs];
                        gemm(*inputs, batch, *outputs, &input, true, &grad, false, 0.0, &mut dw);
                        let mut db = vec![0.0; *outputs];
                        for row in grad.chunks_exact(*outputs) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        grads.push(Params { weights: dw, bias: db });
                    }
                    if need_input {
                        let mut dinput = vec![0.0; batch * inputs];
                        gemm(
                            batch,
                            *outputs,
                            *inputs,
                            &grad,
                            false,
                            &params.weights,
                            true,
                            0.0,
                            &mut dinput,
                        );
                        grad = dinput;
                    }
                }
                _ => return Err(Error::Numerical("trace does not match model layers".into())),
            }
            if !need_input && !param_grads {
                break;
            }
        }
        grads.reverse();
        Ok((
            param_grads.then_some(Gradients { layers: grads }),
            input_grad.then_some(grad),
        ))
    }

    fn first_param_layer(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }))
            .unwrap_or(0)
    }

    /// Logits for one image plus the trace for backpropagation.
    pub fn forward(&self, x: &Image) -> Result<(Vec<f64>, Trace)> {
        self.check_image(x)?;
        let trace = self.forward_batch(x.data(), 1)?;
        Ok((trace.logits.clone(), trace))
    }

    pub fn logits(&self, x: &Image) -> Result<Vec<f64>> {
        self.forward(x).map(|(l, _)| l)
    }

    /// Predicted class of each of `batch` back-to-back inputs; ties go to
    /// the lowest class index.
    pub fn predict_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<usize>> {
        let trace = self.forward_batch(inputs, batch)?;
        let k = self.classes();
        Ok(trace.logits.chunks_exact(k).map(argmax).collect())
    }

    pub fn predict(&self, x: &Image) -> Result<usize> {
        self.check_image(x)?;
        Ok(self.predict_batch(x.data(), 1)?[0])
    }

    /// Per-sample losses and input gradients for a batch.
    pub fn input_gradients_batch(
        &self,
        inputs: &[f64],
        labels: &[usize],
        kind: LossKind,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = labels.len();
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let trace = self.forward_batch(inputs, batch)?;
        let mut dlogits = Vec::with_capacity(batch * k);
        let mut losses = Vec::with_capacity(batch);
        for (z, &y) in trace.logits.chunks_exact(k).zip(labels) {
            losses.push(loss(z, y, kind));
            dlogits.extend(loss_gradient(z, y, kind));
        }
        let (_, dx) = self.backward(trace, &dlogits, false, true)?;
        Ok((losses, dx.expect("input gradient requested")))
    }

    /// Gradient of the loss with respect to the input pixels.
    pub fn input_gradient(&self, x: &Image, label: usize, kind: LossKind) -> Result<Image> {
        self.check_image(x)?;
        let (_, grad) = self.input_gradients_batch(x.data(), &[label], kind)?;
        x.with_raw_data(grad)
    }

    /// Mean loss over a batch and the gradient of that mean with respect to
    /// every parameter.
    pub fn parameter_gradients(&self, inputs: &[f64], labels: &[usize], kind: LossKind) -> Result<(f64, Gradients)> {
        let batch = labels.len();
        let k = self.classes();
        let trace = self.forward_batch(inputs, batch)?;
        let scale = 1.0 / batch as f64;
        let mut dlogits = Vec::with_capacity(batch * k);
        let mut total = 0.0;
        for (z, &y) in trace.logits.chunks_exact(k).zip(labels) {
            total += loss(z, y, kind);
            dlogits.extend(loss_gradient(z, y, kind).into_iter().map(|g| g * scale));
        }
        let (grads, _) = self.backward(trace, &dlogits, true, false)?;
        Ok((total * scale, grads.expect("parameter gradients requested")))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
