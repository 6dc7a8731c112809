//! Encoder-decoder convolutional regressor with hand-written reverse mode.
//!
//! The network maps a 3-channel log image to seven linear head channels:
//! log-albedo (3), log gray shading (1) and the log-variances of albedo,
//! shading and the image-formation constraint (1 each).

mod adam;
mod checkpoint;
mod kernels;

pub use adam::AdamConfig;
pub use checkpoint::CHECKPOINT_MAGIC;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Error, Result};
use crate::tensor::{LogDomainImage, PlaneTensor};
use kernels::ConvGeom;

/// Number of channels the head split expects.
pub const HEAD_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    Relu,
    HeadSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kind: LayerKind::Conv, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn tconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kind: LayerKind::TransposedConv, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn relu(channels: usize) -> Self {
        Self { kind: LayerKind::Relu, in_channels: channels, out_channels: channels, kernel: 0, stride: 1, pad: 0 }
    }

    pub fn head_split() -> Self {
        Self {
            kind: LayerKind::HeadSplit,
            in_channels: HEAD_CHANNELS,
            out_channels: HEAD_CHANNELS,
            kernel: 0,
            stride: 1,
            pad: 0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::TransposedConv)
    }

    /// Weight count (excluding bias) of a parametric layer.
    pub fn weight_len(&self) -> usize {
        if self.has_params() {
            self.kernel * self.kernel * self.in_channels * self.out_channels
        } else {
            0
        }
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom {
            cin: self.in_channels,
            cout: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return arg(format!("layer {self:?} has zero channels"));
        }
        match self.kind {
            LayerKind::Conv | LayerKind::TransposedConv => {
                if self.kernel == 0 {
                    return arg("convolution kernel must be positive");
                }
                if !(1..=2).contains(&self.stride) {
                    return arg(format!("stride {} not in {{1, 2}}", self.stride));
                }
            }
            LayerKind::Relu => {
                if self.in_channels != self.out_channels {
                    return arg("relu must preserve channel count");
                }
            }
            LayerKind::HeadSplit => {
                if self.in_channels != HEAD_CHANNELS || self.out_channels != HEAD_CHANNELS {
                    return arg(format!("head split expects {HEAD_CHANNELS} channels"));
                }
            }
        }
        Ok(())
    }
}

/// The desk-scale encoder-decoder: two stride-2 convolutions down, two
/// stride-2 transposed convolutions up, and a 1x1 head.
pub fn desk_scale_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 16, 3, 1, 1),
        LayerSpec::relu(16),
        LayerSpec::conv(16, 32, 3, 2, 1),
        LayerSpec::relu(32),
        LayerSpec::conv(32, 32, 3, 2, 1),
        LayerSpec::relu(32),
        LayerSpec::tconv(32, 16, 4, 2, 1),
        LayerSpec::relu(16),
        LayerSpec::tconv(16, 16, 4, 2, 1),
        LayerSpec::relu(16),
        LayerSpec::conv(16, HEAD_CHANNELS, 1, 1, 0),
        LayerSpec::head_split(),
    ]
}

/// One tensor per weight block and per bias block of every parametric layer,
/// in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl WeightGradients {
    pub fn zeros_like(net: &NetState) -> Self {
        Self { tensors: net.weights.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &WeightGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The per-pixel prediction maps, all at input resolution.
///
/// Variance maps hold `ln(sigma^2)`; consumers exponentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBundle {
    pub albedo_mean: PlaneTensor,
    pub shading_mean: PlaneTensor,
    pub log_var_albedo: PlaneTensor,
    pub log_var_shading: PlaneTensor,
    pub log_var_constraint: PlaneTensor,
}

impl HeadBundle {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            albedo_mean: PlaneTensor::zeros(height, width, 3),
            shading_mean: PlaneTensor::zeros(height, width, 1),
            log_var_albedo: PlaneTensor::zeros(height, width, 1),
            log_var_shading: PlaneTensor::zeros(height, width, 1),
            log_var_constraint: PlaneTensor::zeros(height, width, 1),
        }
    }

    /// Splits a 7-channel map into the five heads.
    pub fn split(map: &PlaneTensor) -> Result<Self> {
        if map.channels() != HEAD_CHANNELS {
            return arg(format!("head map has {} channels, expected {HEAD_CHANNELS}", map.channels()));
        }
        let (h, w, _) = map.shape();
        let mut a = Vec::with_capacity(h * w * 3);
        let mut rest: [Vec<f64>; 4] = Default::default();
        for p in 0..h * w {
            let px = map.pixel(p);
            a.extend_from_slice(&px[..3]);
            for (k, r) in rest.iter_mut().enumerate() {
                r.push(px[3 + k]);
            }
        }
        let [b, ua, ub, ug] = rest;
        Ok(Self {
            albedo_mean: PlaneTensor::from_raw(h, w, 3, a),
            shading_mean: PlaneTensor::from_raw(h, w, 1, b),
            log_var_albedo: PlaneTensor::from_raw(h, w, 1, ua),
            log_var_shading: PlaneTensor::from_raw(h, w, 1, ub),
            log_var_constraint: PlaneTensor::from_raw(h, w, 1, ug),
        })
    }

    /// Inverse of [`HeadBundle::split`].
    pub fn merge(&self) -> Result<PlaneTensor> {
        PlaneTensor::concat_channels(&[
            &self.albedo_mean,
            &self.shading_mean,
            &self.log_var_albedo,
            &self.log_var_shading,
            &self.log_var_constraint,
        ])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.albedo_mean.height(), self.albedo_mean.width())
    }
}

/// Layer inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    inputs: Vec<PlaneTensor>,
    step_count: u64,
    layers: Vec<LayerSpec>,
}

impl ActivationCache {
    /// The input each layer saw, in layer order.
    pub fn layer_inputs(&self) -> &[PlaneTensor] {
        &self.inputs
    }
}

/// Network weights, Adam moments and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    layers: Vec<LayerSpec>,
    weights: Vec<Vec<f64>>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    step_count: u64,
    rng_seed: u64,
}

impl NetState {
    /// Glorot-uniform weights (zero biases) drawn from a seeded ChaCha stream.
    pub fn new(layers: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        validate_architecture(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut weights = Vec::new();
        for l in layers.iter().filter(|l| l.has_params()) {
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
            let fan_out = (l.out_channels * l.kernel * l.kernel) as f64;
            let s = (6.0 / (fan_in + fan_out)).sqrt();
            weights.push((0..l.weight_len()).map(|_| rng.gen_range(-s..=s)).collect());
            weights.push(vec![0.0; l.out_channels]);
        }
        Ok(Self::from_parts(layers, weights, rng_seed))
    }

    pub fn desk_scale(rng_seed: u64) -> Self {
        Self::new(desk_scale_architecture(), rng_seed).expect("built-in architecture is valid")
    }

    /// Builds a net with explicit weights and fresh optimizer moments.
    pub fn with_weights(layers: Vec<LayerSpec>, weights: Vec<Vec<f64>>, rng_seed: u64) -> Result<Self> {
        validate_architecture(&layers)?;
        let expected = param_shapes(&layers);
        if expected.len() != weights.len() || expected.iter().zip(&weights).any(|(n, w)| *n != w.len()) {
            return arg("weight tensors do not match the architecture");
        }
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return arg("non-finite weight");
        }
        Ok(Self::from_parts(layers, weights, rng_seed))
    }

    fn from_parts(layers: Vec<LayerSpec>, weights: Vec<Vec<f64>>, rng_seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        Self { layers, adam_m: zeros.clone(), adam_v: zeros, weights, step_count: 0, rng_seed }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn adam_moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    /// Mutable access for finite-difference probes; invalidates cached activations
    /// only logically, so callers must re-run `forward`.
    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    /// Product of all strides on the downsampling path.
    pub fn downsample_factor(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).map(|l| l.stride).product()
    }

    fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    /// Runs the network on an arbitrary input map.
    pub fn forward_map(&self, input: &PlaneTensor) -> Result<(PlaneTensor, ActivationCache)> {
        let first = self.layers.first().ok_or_else(|| Error::State("empty network".into()))?;
        if input.channels() != first.in_channels {
            return arg(format!("input has {} channels, net expects {}", input.channels(), first.in_channels));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let mut pi = 0;
        for l in &self.layers {
            let (h, w, _) = x.shape();
            let y = match l.kind {
                LayerKind::Conv => {
                    let g = l.geom();
                    if g.conv_out(h, w).is_none() {
                        return arg(format!("input {h}x{w} too small for {l:?}"));
                    }
                    let y = kernels::conv_forward(&g, &x, &self.weights[pi], &self.weights[pi + 1]);
                    pi += 2;
                    y
                }
                LayerKind::TransposedConv => {
                    let g = l.geom();
                    if g.tconv_out(h, w).is_none() {
                        return arg(format!("input {h}x{w} too small for {l:?}"));
                    }
                    let y = kernels::tconv_forward(&g, &x, &self.weights[pi], &self.weights[pi + 1]);
                    pi += 2;
                    y
                }
                LayerKind::Relu => kernels::relu_forward(&x),
                LayerKind::HeadSplit => x.clone(),
            };
            inputs.push(std::mem::replace(&mut x, y));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("forward pass produced a non-finite value".into()));
        }
        let cache = ActivationCache { inputs, step_count: self.step_count, layers: self.layers.clone() };
        Ok((x, cache))
    }

    /// Backpropagates `grad_output` through the network recorded in `cache`.
    pub fn backward_map(&self, cache: &ActivationCache, grad_output: &PlaneTensor) -> Result<WeightGradients> {
        self.check_cache(cache)?;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.weights.len());
        let mut pi = self.weights.len();
        let mut g = grad_output.clone();
        for (l, input) in self.layers.iter().zip(&cache.inputs).rev() {
            g = match l.kind {
                LayerKind::Conv | LayerKind::TransposedConv => {
                    pi -= 2;
                    let f = if l.kind == LayerKind::Conv { kernels::conv_backward } else { kernels::tconv_backward };
                    let (gx, gw, gb) = f(&l.geom(), input, &self.weights[pi], &g);
                    grads.push(gb);
                    grads.push(gw);
                    gx
                }
                LayerKind::Relu => kernels::relu_backward(input, &g),
                LayerKind::HeadSplit => g,
            };
        }
        grads.reverse();
        Ok(WeightGradients { tensors: grads })
    }

    fn check_cache(&self, cache: &ActivationCache) -> Result<()> {
        if cache.layers != self.layers {
            return Err(Error::State("activation cache was produced by a different architecture".into()));
        }
        if cache.step_count != self.step_count {
            return Err(Error::State(format!(
                "stale activation cache from step {} (net is at step {})",
                cache.step_count, self.step_count
            )));
        }
        Ok(())
    }

    fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return arg(format!("image dimensions {h}x{w} must be divisible by {f}"));
        }
        Ok(())
    }

    /// Predicts every head for a log-domain RGB image.
    pub fn forward(&self, image: &LogDomainImage) -> Result<(HeadBundle, ActivationCache)> {
        let planes = image.planes();
        if planes.channels() != 3 {
            return arg(format!("expected a 3-channel image, got {}", planes.channels()));
        }
        if self.output_channels() != HEAD_CHANNELS {
            return Err(Error::State("network does not end in the 7-channel head".into()));
        }
        let (h, w, _) = planes.shape();
        self.check_image(h, w)?;
        let (out, cache) = self.forward_map(planes)?;
        if out.height() != h || out.width() != w {
            return Err(Error::State(format!(
                "head resolution {}x{} differs from input {h}x{w}",
                out.height(),
                out.width()
            )));
        }
        Ok((HeadBundle::split(&out)?, cache))
    }

    /// Gradient of a scalar loss w.r.t. every weight, given its gradient w.r.t. the heads.
    pub fn backward(&self, cache: &ActivationCache, head_grads: &HeadBundle) -> Result<WeightGradients> {
        self.check_cache(cache)?;
        let g = head_grads.merge()?;
        let out_shape = match cache.inputs.last() {
            Some(last) => (last.height(), last.width()),
            None => return Err(Error::State("empty activation cache".into())),
        };
        if (g.height(), g.width()) != out_shape {
            return Err(Error::State("head gradients do not match the cached forward pass".into()));
        }
        self.backward_map(cache, &g)
    }

    /// One bias-corrected Adam update; increments `step_count` by one.
    pub fn adam_step(&mut self, grads: &WeightGradients, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        if grads.tensors.len() != self.weights.len()
            || grads.tensors.iter().zip(&self.weights).any(|(g, w)| g.len() != w.len())
        {
            return arg("gradient shapes do not match weights");
        }
        let t = self.step_count + 1;
        for ((w, g), (m, v)) in self
            .weights
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.adam_m.iter_mut().zip(self.adam_v.iter_mut()))
        {
            adam::update(w, g, m, v, t, cfg);
        }
        self.step_count = t;
        Ok(())
    }
}

fn param_shapes(layers: &[LayerSpec]) -> Vec<usize> {
    layers
        .iter()
        .filter(|l| l.has_params())
        .flat_map(|l| [l.weight_len(), l.out_channels])
        .collect()
}

fn validate_architecture(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return arg("architecture has no layers");
    }
    for (i, l) in layers.iter().enumerate() {
        l.validate()?;
        if i > 0 && layers[i - 1].out_channels != l.in_channels {
            return arg(format!("layer {i} expects {} channels, previous emits {}", l.in_channels, layers[i - 1].out_channels));
        }
        if l.kind == LayerKind::HeadSplit && i + 1 != layers.len() {
            return arg("head split must be the final layer");
        }
    }
    Ok(())
}
