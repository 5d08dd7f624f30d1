//! Feed-forward classifiers: dense and NHWC convolution layers, each with an
//! optional normalization, a weight parameterization and an activation,
//! followed by one linear classifier head.

use std::fmt;
use std::str::FromStr;

use super::{HarnessError, Result};
use crate::activation_norm::{
    norm_backward, norm_forward, Affine, NormAxis, NormCache, NormScheme, NormStats, StatsMode, DEFAULT_MOMENTUM,
};
use crate::numeric::{PrecisionMode, Rng, Tensor};
use crate::weight_norm::{BoundedWeight, NormOrder, WeightNormError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(0, x)`.
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    /// `f(a x) = a f(x)` for `a > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    fn forward(self, p: PrecisionMode, x: f64) -> f64 {
        match self {
            Activation::Relu if x > 0.0 || x.is_nan() => x,
            Activation::Relu => 0.0,
            Activation::Identity => x,
            Activation::Tanh => p.round(x.tanh()),
        }
    }

    fn backward(self, p: PrecisionMode, grad: f64, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu if pre > 0.0 => grad,
            Activation::Relu => 0.0,
            Activation::Identity => grad,
            Activation::Tanh => p.mul(grad, p.sub(1.0, p.mul(out, out))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" | "ramp" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(HarnessError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightParam {
    Plain,
    /// Weight normalization with a free per-channel scale.
    WN,
    /// Bounded weight normalization with a fixed per-layer rho.
    BWN(NormOrder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        outputs: usize,
    },
    /// Square kernel, zero padding `kernel / 2`.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub norm: Option<NormScheme>,
    pub weight: WeightParam,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    /// `[height, width, channels]`, rows stored NHWC.
    Image([usize; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// Dense hidden layers of the given widths, all sharing one
    /// normalization, weight parameterization and ReLU.
    pub fn mlp(
        features: usize,
        widths: &[usize],
        norm: Option<NormScheme>,
        weight: WeightParam,
        classes: usize,
    ) -> Self {
        let layers = widths
            .iter()
            .map(|&outputs| LayerSpec {
                kind: LayerKind::Linear { outputs },
                norm,
                weight,
                activation: Activation::Relu,
            })
            .collect();
        Self { input: InputShape::Flat(features), layers, classes }
    }

    /// Convolution stack with `kernel x kernel` filters; `strides[i]`
    /// applies to layer `i` (missing entries mean 1).
    pub fn cnn(
        image: [usize; 3],
        channels: &[usize],
        kernel: usize,
        strides: &[usize],
        norm: Option<NormScheme>,
        weight: WeightParam,
        classes: usize,
    ) -> Self {
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerSpec {
                kind: LayerKind::Conv { channels: c, kernel, stride: strides.get(i).copied().unwrap_or(1) },
                norm,
                weight,
                activation: Activation::Relu,
            })
            .collect();
        Self { input: InputShape::Image(image), layers, classes }
    }

    /// Per-layer geometry plus the head's fan-in; fails if the shapes do not
    /// chain.
    pub fn geometry(&self) -> Result<(Vec<Geometry>, usize)> {
        if self.classes < 2 {
            return Err(HarnessError::ShapeChain(format!("classifier needs >= 2 classes, got {}", self.classes)));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let g = match (layer.kind, shape) {
                (LayerKind::Linear { outputs }, _) => {
                    let inputs = match shape {
                        InputShape::Flat(f) => f,
                        InputShape::Image(d) => d.iter().product(),
                    };
                    Geometry::Dense { inputs, outputs }
                }
                (LayerKind::Conv { channels, kernel, stride }, InputShape::Image([h, w, c])) => {
                    if kernel == 0 || stride == 0 {
                        return Err(HarnessError::ShapeChain(format!("layer {i}: kernel and stride must be >= 1")));
                    }
                    let padding = kernel / 2;
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(HarnessError::ShapeChain(format!(
                            "layer {i}: kernel {kernel} larger than {h}x{w} input"
                        )));
                    }
                    let out_height = (h + 2 * padding - kernel) / stride + 1;
                    let out_width = (w + 2 * padding - kernel) / stride + 1;
                    Geometry::Conv {
                        height: h,
                        width: w,
                        channels: c,
                        kernel,
                        stride,
                        padding,
                        out_height,
                        out_width,
                        out_channels: channels,
                    }
                }
                (LayerKind::Conv { .. }, InputShape::Flat(_)) => {
                    return Err(HarnessError::ShapeChain(format!("layer {i}: convolution needs an image input")));
                }
            };
            if g.fan_in() == 0 || g.out_channels() == 0 {
                return Err(HarnessError::ShapeChain(format!("layer {i} has an empty dimension")));
            }
            if let Some(scheme) = layer.norm {
                scheme.validate()?;
            }
            shape = match g {
                Geometry::Dense { outputs, .. } => InputShape::Flat(outputs),
                Geometry::Conv { out_height, out_width, out_channels, .. } => {
                    InputShape::Image([out_height, out_width, out_channels])
                }
            };
            out.push(g);
        }
        let head_inputs = match shape {
            InputShape::Flat(f) => f,
            InputShape::Image(d) => d.iter().product(),
        };
        if head_inputs == 0 {
            return Err(HarnessError::ShapeChain("classifier has no inputs".into()));
        }
        Ok((out, head_inputs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        out_height: usize,
        out_width: usize,
        out_channels: usize,
    },
}

impl Geometry {
    pub fn fan_in(&self) -> usize {
        match *self {
            Geometry::Dense { inputs, .. } => inputs,
            Geometry::Conv { kernel, channels, .. } => kernel * kernel * channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            Geometry::Dense { outputs, .. } => outputs,
            Geometry::Conv { out_channels, .. } => out_channels,
        }
    }

    /// Output positions per sample: 1 for dense layers.
    pub fn positions(&self) -> usize {
        match *self {
            Geometry::Dense { .. } => 1,
            Geometry::Conv { out_height, out_width, .. } => out_height * out_width,
        }
    }

    pub fn out_features(&self) -> usize {
        self.positions() * self.out_channels()
    }
}

/// Patch matrix `[samples * out_h * out_w, kernel * kernel * channels]`,
/// patch entries ordered `(ky, kx, channel)`.
fn im2col(a: &Tensor, g: &Geometry) -> Tensor {
    let Geometry::Conv { height, width, channels, kernel, stride, padding, out_height, out_width, .. } = *g else {
        return a.clone();
    };
    let samples = a.shape()[0];
    let cols = kernel * kernel * channels;
    let src = a.data();
    let mut data = vec![0.0; samples * out_height * out_width * cols];
    for s in 0..samples {
        for oy in 0..out_height {
            for ox in 0..out_width {
                let row = ((s * out_height + oy) * out_width + ox) * cols;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let from = ((s * height + iy as usize) * width + ix as usize) * channels;
                        let to = row + (ky * kernel + kx) * channels;
                        data[to..to + channels].copy_from_slice(&src[from..from + channels]);
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![samples * out_height * out_width, cols], data, a.precision())
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im(cols: &Tensor, g: &Geometry, samples: usize) -> Tensor {
    let Geometry::Conv { height, width, channels, kernel, stride, padding, out_height, out_width, .. } = *g else {
        return cols.clone();
    };
    let p = cols.precision();
    let width_cols = kernel * kernel * channels;
    let src = cols.data();
    let mut data = vec![0.0; samples * height * width * channels];
    for s in 0..samples {
        for oy in 0..out_height {
            for ox in 0..out_width {
                let row = ((s * out_height + oy) * out_width + ox) * width_cols;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let to = ((s * height + iy as usize) * width + ix as usize) * channels;
                        let from = row + (ky * kernel + kx) * channels;
                        for c in 0..channels {
                            data[to + c] = p.add(data[to + c], src[from + c]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![samples, height * width * channels], data, p)
}

fn add_row_bias(z: &Tensor, bias: &[f64]) -> Tensor {
    let p = z.precision();
    let cols = bias.len();
    let data = z.data().iter().enumerate().map(|(i, &v)| p.add(v, bias[i % cols])).collect();
    Tensor::from_raw(z.shape().to_vec(), data, p)
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = t.dims2().expect("rank 2");
    let p = t.precision();
    let d = t.data();
    (0..cols).map(|j| p.sum((0..rows).map(|i| d[i * cols + j]))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Plain(Tensor),
    Reparam(BoundedWeight),
}

impl Weight {
    pub fn effective(&self) -> Result<Tensor, WeightNormError> {
        match self {
            Weight::Plain(w) => Ok(w.clone()),
            Weight::Reparam(bw) => bw.effective(),
        }
    }

    /// The trained tensor: `w` itself or the direction `v`.
    pub fn stored(&self) -> &Tensor {
        match self {
            Weight::Plain(w) => w,
            Weight::Reparam(bw) => &bw.v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub geometry: Geometry,
    pub weight: Weight,
    /// Only on layers without normalization; `beta` plays this role
    /// otherwise.
    pub bias: Option<Vec<f64>>,
    pub affine: Option<Affine>,
    pub stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[classes, fan_in]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    lhs: Tensor,
    weight: Tensor,
    pre: Tensor,
    out: Tensor,
    norm: Option<NormCache>,
}

/// Activations kept by a Train-mode forward pass for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    head_input: Tensor,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// Gradient of the stored tensor (`w` or `v`).
    pub weight: Tensor,
    /// WN scales.
    pub scale: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub head_weight: Tensor,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    /// Same order as [`Model::flat_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.data());
            for part in [&g.scale, &g.bias, &g.gamma, &g.beta].into_iter().flatten() {
                out.extend_from_slice(part);
            }
        }
        out.extend_from_slice(self.head_weight.data());
        out.extend_from_slice(&self.head_bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub head: Head,
    precision: PrecisionMode,
}

const INIT_STREAM: u64 = 0x1417;
const HEAD_STREAM: u64 = INIT_STREAM + 0x1000;

fn gaussian_init(rows: usize, fan_in: usize, rng: &mut Rng, p: PrecisionMode) -> Result<Tensor> {
    let scale = (2.0 / fan_in as f64).sqrt();
    let data = (0..rows * fan_in).map(|_| scale * rng.normal()).collect();
    Ok(Tensor::quantized(vec![rows, fan_in], data, p)?)
}

/// Initialize every weight with `N(0, 2 / fan_in)` draws. Layer `i` draws
/// from its own stream of `seed`, so models sharing a seed and layer shapes
/// start from identical weights whatever their normalization. BWN layers fix
/// rho from this initial tensor.
pub fn build_model(spec: &ModelSpec, seed: u64, precision: PrecisionMode) -> Result<Model> {
    let (geometry, head_inputs) = spec.geometry()?;
    let mut layers = Vec::with_capacity(geometry.len());
    for (i, (ls, g)) in spec.layers.iter().zip(&geometry).enumerate() {
        let mut rng = Rng::with_stream(seed, INIT_STREAM + i as u64);
        let initial = gaussian_init(g.out_channels(), g.fan_in(), &mut rng, precision)?;
        let weight = match ls.weight {
            WeightParam::Plain => Weight::Plain(initial),
            WeightParam::WN => Weight::Reparam(BoundedWeight::weight_norm(initial)?),
            WeightParam::BWN(order) => Weight::Reparam(BoundedWeight::bounded(initial, order)?),
        };
        let c = g.out_channels();
        let lanes = |scheme: &NormScheme| match scheme.axis {
            NormAxis::Batch => c,
            NormAxis::Feature => 0,
        };
        layers.push(Layer {
            spec: *ls,
            geometry: *g,
            weight,
            bias: ls.norm.is_none().then(|| vec![0.0; c]),
            affine: ls.norm.map(|_| Affine::identity(c)),
            stats: ls.norm.map(|s| NormStats::new(lanes(&s), DEFAULT_MOMENTUM)),
        });
    }
    let mut rng = Rng::with_stream(seed, HEAD_STREAM);
    let head =
        Head { weight: gaussian_init(spec.classes, head_inputs, &mut rng, precision)?, bias: vec![0.0; spec.classes] };
    Ok(Model { spec: spec.clone(), layers, head, precision })
}

impl Layer {
    /// Forward one layer. Returns the output `[samples, out_features]`, the
    /// cache, and in Train mode the updated normalization statistics. Eval
    /// mode before any Train step falls back to batch statistics.
    fn forward(&self, a: &Tensor, mode: StatsMode) -> Result<(Tensor, LayerCache, Option<NormStats>)> {
        let samples = a.shape()[0];
        let lhs = im2col(a, &self.geometry);
        let weight = self.weight.effective()?;
        let mut z = lhs.matmul_nt(&weight)?;
        if let Some(b) = &self.bias {
            z = add_row_bias(&z, b);
        }
        let (y, norm, stats) = match (&self.spec.norm, &self.stats, &self.affine) {
            (Some(scheme), Some(stats), Some(affine)) => {
                let mut stats = stats.clone();
                let effective_mode =
                    if mode == StatsMode::Eval && scheme.axis == NormAxis::Batch && !stats.is_initialized() {
                        StatsMode::Train
                    } else {
                        mode
                    };
                // Layer norm keeps no running statistics.
                if scheme.axis == NormAxis::Feature {
                    stats = NormStats::new(z.shape()[0], stats.momentum);
                }
                let (y, cache) = norm_forward(&z, scheme, affine, effective_mode, &mut stats)?;
                let updated = (mode == StatsMode::Train && scheme.axis == NormAxis::Batch).then_some(stats);
                (y, Some(cache), updated)
            }
            _ => (z, None, None),
        };
        let p = y.precision();
        let act = self.spec.activation;
        let out = y.map(|v| act.forward(p, v));
        let reshaped = out.reshape(vec![samples, self.geometry.out_features()])?;
        Ok((reshaped, LayerCache { lhs, weight, pre: y, out, norm }, stats))
    }
}

impl Model {
    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    fn input(&self, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.dims2()?;
        let expected = match self.spec.input {
            InputShape::Flat(f) => f,
            InputShape::Image(d) => d.iter().product(),
        };
        if cols != expected {
            return Err(HarnessError::ShapeChain(format!("input has {cols} features, model expects {expected}")));
        }
        Ok(if x.precision() == self.precision { x.clone() } else { x.to_precision(self.precision) })
    }

    fn head_forward(&self, h: &Tensor) -> Result<Tensor> {
        Ok(add_row_bias(&h.matmul_nt(&self.head.weight)?, &self.head.bias))
    }

    /// Train-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut a = self.input(x)?;
        let samples = a.shape()[0];
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let (out, cache, stats) = layer.forward(&a, StatsMode::Train)?;
            if let Some(s) = stats {
                layer.stats = Some(s);
            }
            caches.push(cache);
            a = out;
        }
        let logits = self.head_forward(&a)?;
        Ok((logits, ForwardCache { layers: caches, head_input: a, samples }))
    }

    /// Eval-mode logits; the model is not modified.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = self.input(x)?;
        for layer in &self.layers {
            a = layer.forward(&a, StatsMode::Eval)?.0;
        }
        self.head_forward(&a)
    }

    /// Gradients of all parameters given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        let head_weight = grad_logits.transpose()?.matmul_nt(&cache.head_input.transpose()?)?;
        let head_bias = column_sums(grad_logits);
        let mut grad = grad_logits.matmul(&self.head.weight)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let p = grad.precision();
            let g = &layer.geometry;
            let gh = grad.reshape(vec![cache.samples * g.positions(), g.out_channels()])?;
            let act = layer.spec.activation;
            let gy: Vec<f64> = gh
                .data()
                .iter()
                .zip(lc.pre.data().iter().zip(lc.out.data()))
                .map(|(&gv, (&pre, &out))| act.backward(p, gv, pre, out))
                .collect();
            let gy = Tensor::from_raw(gh.shape().to_vec(), gy, p);
            let (gz, gamma, beta) = match (&layer.spec.norm, &lc.norm) {
                (Some(scheme), Some(nc)) => {
                    let ng = norm_backward(&gy, nc, scheme)?;
                    (ng.x, ng.gamma, ng.beta)
                }
                _ => (gy, None, None),
            };
            let bias = layer.bias.as_ref().map(|_| column_sums(&gz));
            let gz_t = gz.transpose()?;
            let grad_w = gz_t.matmul_nt(&lc.lhs.transpose()?)?;
            if i > 0 {
                let glhs = gz.matmul(&lc.weight)?;
                grad = col2im(&glhs, g, cache.samples);
            }
            let (weight, scale) = match &layer.weight {
                Weight::Plain(_) => (grad_w, None),
                Weight::Reparam(bw) => {
                    let r = bw.backward(&grad_w)?;
                    (r.v, r.g)
                }
            };
            layers.push(LayerGrads { weight, scale, bias, gamma, beta });
        }
        layers.reverse();
        Ok(Gradients { layers, head_weight, head_bias })
    }

    /// Mean softmax cross-entropy on a minibatch and its gradients (Train
    /// mode).
    pub fn loss_and_gradients(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, cache) = self.forward_train(x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&cache, &grad)?))
    }

    /// Eval-mode accuracy in batches of `chunk` rows.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
        let (rows, cols) = x.dims2()?;
        if rows == 0 {
            return Ok(0.0);
        }
        let chunk = chunk.max(2);
        let mut correct = 0usize;
        let mut start = 0;
        while start < rows {
            let mut end = (start + chunk).min(rows);
            if rows - end == 1 {
                end = rows;
            }
            let part =
                Tensor::from_raw(vec![end - start, cols], x.data()[start * cols..end * cols].to_vec(), x.precision());
            let logits = self.predict(&part)?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels[start..end])
                .filter(|(pred, label)| **pred == Some(**label))
                .count();
            start = end;
        }
        Ok(correct as f64 / rows as f64)
    }

    /// L2 norm of every effective weight row, per hidden layer.
    pub fn channel_norms(&self) -> Result<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| {
                let w = l.weight.effective()?;
                let cols = w.shape()[1];
                Ok(w.data().chunks(cols).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
            })
            .collect()
    }

    /// Every trainable value, layer by layer: stored weight, WN scale, bias,
    /// gamma, beta; then the head weight and bias.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.stored().data());
            if let Weight::Reparam(bw) = &l.weight {
                out.extend_from_slice(&bw.g);
            }
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
            if let (Some(a), Some(s)) = (&l.affine, &l.spec.norm) {
                if s.affine {
                    out.extend_from_slice(&a.gamma);
                    out.extend_from_slice(&a.beta);
                }
            }
        }
        out.extend_from_slice(self.head.weight.data());
        out.extend_from_slice(&self.head.bias);
        out
    }

    /// Inverse of [`Model::flat_parameters`]; values are rounded to the
    /// model precision.
    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        let p = self.precision;
        let expected = self.flat_parameters().len();
        if values.len() != expected {
            return Err(HarnessError::ShapeChain(format!("{} parameters given, model has {expected}", values.len())));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let part: Vec<f64> = values[at..at + n].iter().map(|&v| p.round(v)).collect();
            at += n;
            part
        };
        for l in self.layers.iter_mut() {
            let shape = l.weight.stored().shape().to_vec();
            let data = take(shape.iter().product());
            match &mut l.weight {
                Weight::Plain(w) => *w = Tensor::from_raw(shape, data, p),
                Weight::Reparam(bw) => {
                    bw.v = Tensor::from_raw(shape, data, p);
                    let n = bw.g.len();
                    bw.g = take(n);
                }
            }
            if let Some(b) = &mut l.bias {
                *b = take(b.len());
            }
            if let (Some(a), Some(s)) = (&mut l.affine, &l.spec.norm) {
                if s.affine {
                    a.gamma = take(a.gamma.len());
                    a.beta = take(a.beta.len());
                }
            }
        }
        let shape = self.head.weight.shape().to_vec();
        self.head.weight = Tensor::from_raw(shape.clone(), take(shape.iter().product()), p);
        self.head.bias = take(self.head.bias.len());
        Ok(())
    }
}

/// Predicted class per row; `None` if the row contains NaN. Ties go to the
/// lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<Option<usize>> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            if row.iter().any(|v| v.is_nan()) {
                return None;
            }
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Some(best)
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits,
/// evaluated in the logits' precision.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits.dims2()?;
    if labels.len() != rows {
        return Err(HarnessError::ShapeChain(format!("{rows} logit rows for {} labels", labels.len())));
    }
    let p = logits.precision();
    let n = p.count(rows);
    let mut grad = vec![0.0; rows * cols];
    let mut losses = Vec::with_capacity(rows);
    for (i, row) in logits.data().chunks(cols).enumerate() {
        let label = labels[i];
        if label >= cols {
            return Err(HarnessError::LabelOutOfRange { label: label as i64, record: i, classes: cols });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| p.exp(p.sub(z, max))).collect();
        let total = p.sum(exps.iter().copied());
        losses.push(p.sub(p.ln(total), p.sub(row[label], max)));
        for j in 0..cols {
            let prob = p.div(exps[j], total);
            let target = if j == label { 1.0 } else { 0.0 };
            grad[i * cols + j] = p.div(p.sub(prob, target), n);
        }
    }
    let loss = p.mean(losses, rows);
    Ok((loss, Tensor::from_raw(vec![rows, cols], grad, p)))
}

/// Set every BWN layer's rho to 1 and push the removed scale downstream:
/// with `P` the running product of removed rhos, hidden biases, affine
/// shifts and running means are divided by `P` and the classifier weight is
/// multiplied by it. Requires positively homogeneous activations and no
/// dispersion normalization (mean-only is fine).
pub fn fold_rho_into_classifier(model: &Model) -> Result<Model, WeightNormError> {
    let mut out = model.clone();
    let p = model.precision;
    let mut scale = 1.0;
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if !layer.spec.activation.is_positively_homogeneous() {
            return Err(WeightNormError::NonHomogeneousActivation { layer: i });
        }
        if let Some(s) = &layer.spec.norm {
            if !s.mean_only {
                return Err(WeightNormError::NotFoldable {
                    layer: i,
                    reason: format!("{} normalization divides out the scale", s.metric),
                });
            }
        }
        if let Weight::Reparam(bw) = &mut layer.weight {
            if bw.mode == crate::weight_norm::WeightMode::BWN {
                scale *= bw.rho;
                bw.rho = 1.0;
            }
        }
        let shrink = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = p.round(*x / scale));
        if let Some(b) = &mut layer.bias {
            shrink(b);
        }
        if let Some(a) = &mut layer.affine {
            shrink(&mut a.beta);
        }
        if let Some(s) = &mut layer.stats {
            shrink(&mut s.running_mean);
            shrink(&mut s.mean);
        }
    }
    out.head.weight = out.head.weight.map(|w| p.round(w * scale));
    Ok(out)
}
