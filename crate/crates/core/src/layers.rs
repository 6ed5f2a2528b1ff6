//! Layers with forward and reverse-mode passes.
//!
//! Images travel as `[batch, height, width, channels]`; dense activations as
//! `[batch, features]`. Convolution weights are stored `[kh, kw, in, out]`.
//! Forward passes in [`Mode::Train`] cache what backward needs; eval passes
//! cache nothing and can run through a shared reference via [`Layer::infer`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::softmax::{check_temperature, softmax_rows};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
    GlobalAvgPool,
    SoftmaxT {
        temperature: f64,
    },
    /// `relu(conv2(relu(conv1(x))) + x)` with same-padded odd kernels.
    ResidualBlock {
        channels: usize,
        kernel: usize,
    },
}

impl LayerSpec {
    /// Valid convolution with stride 1.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride: 1, padding: 0 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::SoftmaxT { .. } => "softmax_t",
            LayerSpec::ResidualBlock { .. } => "residual_block",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{} {name} must be >= 1", self.kind())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, .. } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel_h", kernel_h)?;
                positive("kernel_w", kernel_w)?;
                positive("stride", stride)
            }
            LayerSpec::MaxPool2d { window, stride } => {
                positive("window", window)?;
                positive("stride", stride)
            }
            LayerSpec::Dense { inputs, units } => {
                positive("inputs", inputs)?;
                positive("units", units)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            LayerSpec::SoftmaxT { temperature } => check_temperature(temperature),
            LayerSpec::ResidualBlock { channels, kernel } => {
                positive("channels", channels)?;
                positive("kernel", kernel)?;
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("residual kernel {kernel} must be odd")));
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::GlobalAvgPool => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let image = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(shape_err!("{} expects [h, w, c] samples, got {input:?}", self.kind())),
            }
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let (h, w, c) = image(input)?;
                if c != in_channels {
                    return Err(shape_err!("conv2d expects {in_channels} input channels, got {c}"));
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kernel_h || pw < kernel_w {
                    return Err(shape_err!("conv2d {kernel_h}x{kernel_w} kernel does not fit a {h}x{w} input"));
                }
                Ok(vec![(ph - kernel_h) / stride + 1, (pw - kernel_w) / stride + 1, out_channels])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let (h, w, c) = image(input)?;
                if h < window || w < window {
                    return Err(shape_err!("maxpool2d {window}x{window} window does not fit a {h}x{w} input"));
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerSpec::Dense { inputs, units } => match *input {
                [f] if f == inputs => Ok(vec![units]),
                _ => Err(shape_err!("dense expects [{inputs}] samples, got {input:?}")),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GlobalAvgPool => {
                let (_, _, c) = image(input)?;
                Ok(vec![c])
            }
            LayerSpec::SoftmaxT { .. } => match *input {
                [k] if k >= 2 => Ok(vec![k]),
                _ => Err(shape_err!("softmax_t expects [classes>=2] samples, got {input:?}")),
            },
            LayerSpec::ResidualBlock { channels, kernel } => {
                let (h, w, c) = image(input)?;
                if c != channels {
                    return Err(shape_err!("residual block expects {channels} channels, got {c}"));
                }
                if h + 2 * (kernel / 2) < kernel || w + 2 * (kernel / 2) < kernel {
                    return Err(shape_err!("residual kernel does not fit a {h}x{w} input"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Trainable scalar count: conv `kh·kw·in·out + out`, dense `in·out + out`.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                kernel_h * kernel_w * in_channels * out_channels + out_channels
            }
            LayerSpec::Dense { inputs, units } => inputs * units + units,
            LayerSpec::ResidualBlock { channels, kernel } => 2 * (kernel * kernel * channels * channels + channels),
            _ => 0,
        }
    }
}

/// A named trainable tensor and the gradient from the latest backward pass.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(name: &str, value: Tensor) -> Self {
        let grad = value.zeros_like();
        Self { name: name.to_string(), value, grad }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Tensor),
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Mask(Vec<f64>),
    Shape(Vec<usize>),
    Output(Tensor),
    Residual { hidden: Tensor, sum: Tensor },
}

/// Parameters and forward caches of one layer.
#[derive(Clone, Debug, Default)]
pub struct LayerState {
    params: Vec<Param>,
    inner: Vec<Layer>,
    cache: Option<Cache>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    state: LayerState,
}

/// He-style normal init: `N(0, 2 / fan_in)`.
fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..len).map(|_| rng.normal(0.0, std)).collect())
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
}

struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    co: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (c, k) = (self.c, self.patch_len());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * c..][..c];
                        match self.source(oy, ox, ky, kx) {
                            Some((iy, ix)) => dst.copy_from_slice(&x[(iy * self.w + ix) * c..][..c]),
                            None => dst.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (c, k) = (self.c, self.patch_len());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                            let src = &row[(ky * self.kw + kx) * c..][..c];
                            for (d, s) in dx[(iy * self.w + ix) * c..][..c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn split_batch(input: &Tensor) -> Result<(usize, Vec<usize>)> {
    if input.rank() < 2 {
        return Err(shape_err!("layer input needs a batch axis, got {:?}", input.shape()));
    }
    Ok((input.shape()[0], input.shape()[1..].to_vec()))
}

fn with_batch(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(sample.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(sample);
    shape
}

impl Layer {
    /// Validates the spec and initializes parameters (He-normal weights, zero biases).
    pub fn new(spec: LayerSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let mut state = LayerState::default();
        match spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                let fan_in = kernel_h * kernel_w * in_channels;
                state.params.push(Param::new(
                    "weight",
                    he_normal(&[kernel_h, kernel_w, in_channels, out_channels], fan_in, rng),
                ));
                state.params.push(Param::new("bias", zeros(&[out_channels])));
            }
            LayerSpec::Dense { inputs, units } => {
                state.params.push(Param::new("weight", he_normal(&[inputs, units], inputs, rng)));
                state.params.push(Param::new("bias", zeros(&[units])));
            }
            LayerSpec::ResidualBlock { channels, kernel } => {
                let conv = LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: channels,
                    kernel_h: kernel,
                    kernel_w: kernel,
                    stride: 1,
                    padding: kernel / 2,
                };
                state.inner.push(Layer::new(conv.clone(), rng)?);
                state.inner.push(Layer::new(conv, rng)?);
            }
            _ => {}
        }
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn state(&self) -> &LayerState {
        &self.state
    }

    /// All parameters, depth first. Nested names are dotted (`conv1.weight`).
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = self.state.params.iter().map(|p| (p.name.clone(), p)).collect();
        for (i, inner) in self.state.inner.iter().enumerate() {
            for (name, p) in inner.params() {
                out.push((format!("conv{}.{name}", i + 1), p));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = self.state.params.iter_mut().map(|p| (p.name.clone(), p)).collect();
        for (i, inner) in self.state.inner.iter_mut().enumerate() {
            for (name, p) in inner.params_mut() {
                out.push((format!("conv{}.{name}", i + 1), p));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.state.cache = None;
        for inner in &mut self.state.inner {
            inner.clear_cache();
        }
    }

    /// Eval-mode forward through a shared reference. Pure in `(params, input)`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.compute(input, Mode::Eval, None, false)?.0)
    }

    /// Forward pass. Train mode caches activations for [`Layer::backward`] and
    /// needs `rng` for dropout; eval mode clears any stale cache.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, rng: Option<&mut RngState>) -> Result<Tensor> {
        let caching = mode == Mode::Train;
        if !caching {
            self.clear_cache();
        }
        if let LayerSpec::ResidualBlock { .. } = self.spec {
            return self.residual_forward(input, mode, caching);
        }
        let (out, cache) = self.compute(input, mode, rng, caching)?;
        self.state.cache = cache;
        Ok(out)
    }

    fn compute(
        &self,
        input: &Tensor,
        mode: Mode,
        rng: Option<&mut RngState>,
        caching: bool,
    ) -> Result<(Tensor, Option<Cache>)> {
        let (batch, sample) = split_batch(input)?;
        let out_sample = self.spec.output_shape(&sample)?;
        let keep_input = || caching.then(|| Cache::Input(input.clone()));
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                let geom = self.conv_geom(&sample, &out_sample);
                let out = conv_forward(&geom, input.data(), batch, &self.state.params);
                Ok((Tensor::from_parts(with_batch(batch, &out_sample), out), keep_input()))
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let (h, w, c) = (sample[0], sample[1], sample[2]);
                let (oh, ow) = (out_sample[0], out_sample[1]);
                let mut out = Vec::with_capacity(batch * oh * ow * c);
                let mut argmax = Vec::with_capacity(if caching { batch * oh * ow * c } else { 0 });
                let x = input.data();
                for b in 0..batch {
                    let base = b * h * w * c;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = base + ((oy * stride) * w + ox * stride) * c + ch;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        let idx = base + ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                        if x[idx] > x[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out.push(x[best]);
                                if caching {
                                    argmax.push(best);
                                }
                            }
                        }
                    }
                }
                let cache = caching.then(|| Cache::Pool { argmax, input_shape: input.shape().to_vec() });
                Ok((Tensor::from_parts(with_batch(batch, &out_sample), out), cache))
            }
            LayerSpec::Dense { inputs, units } => {
                let mut out = vec![0.0; batch * units];
                gemm(input.data(), self.state.params[0].value.data(), &mut out, batch, inputs, units);
                let bias = self.state.params[1].value.data();
                for row in out.chunks_mut(units) {
                    for (o, b) in row.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                Ok((Tensor::from_parts(vec![batch, units], out), keep_input()))
            }
            LayerSpec::Relu => {
                let out = input.data().iter().map(|&v| v.max(0.0)).collect();
                Ok((Tensor::from_parts(input.shape().to_vec(), out), keep_input()))
            }
            LayerSpec::Dropout { rate } => match mode {
                Mode::Eval => Ok((input.clone(), None)),
                Mode::Train => {
                    let rng = rng.ok_or_else(|| Error::Usage("dropout in train mode needs an rng".into()))?;
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> =
                        (0..input.len()).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
                    let out = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                    Ok((Tensor::from_parts(input.shape().to_vec(), out), caching.then_some(Cache::Mask(mask))))
                }
            },
            LayerSpec::Flatten => {
                let out = Tensor::from_parts(with_batch(batch, &out_sample), input.data().to_vec());
                Ok((out, caching.then(|| Cache::Shape(input.shape().to_vec()))))
            }
            LayerSpec::GlobalAvgPool => {
                let (h, w, c) = (sample[0], sample[1], sample[2]);
                let area = (h * w) as f64;
                let mut out = vec![0.0; batch * c];
                for (b, img) in input.data().chunks(h * w * c).enumerate() {
                    let acc = &mut out[b * c..(b + 1) * c];
                    for px in img.chunks(c) {
                        for (a, v) in acc.iter_mut().zip(px) {
                            *a += v;
                        }
                    }
                    for a in acc.iter_mut() {
                        *a /= area;
                    }
                }
                Ok((Tensor::from_parts(vec![batch, c], out), caching.then(|| Cache::Shape(input.shape().to_vec()))))
            }
            LayerSpec::SoftmaxT { temperature } => {
                let out = softmax_rows(input, temperature);
                let cache = caching.then(|| Cache::Output(out.clone()));
                Ok((out, cache))
            }
            LayerSpec::ResidualBlock { .. } => {
                let [conv1, conv2] = &self.state.inner[..] else { unreachable!() };
                let hidden = conv1.infer(input)?;
                let act = relu(&hidden);
                let mut sum = conv2.infer(&act)?;
                for (s, x) in sum.data_mut().iter_mut().zip(input.data()) {
                    *s += x;
                }
                Ok((relu(&sum), None))
            }
        }
    }

    fn residual_forward(&mut self, input: &Tensor, mode: Mode, caching: bool) -> Result<Tensor> {
        let (_, sample) = split_batch(input)?;
        self.spec.output_shape(&sample)?;
        let [conv1, conv2] = &mut self.state.inner[..] else { unreachable!() };
        let hidden = conv1.forward(input, mode, None)?;
        let act = relu(&hidden);
        let mut sum = conv2.forward(&act, mode, None)?;
        for (s, x) in sum.data_mut().iter_mut().zip(input.data()) {
            *s += x;
        }
        let out = relu(&sum);
        self.state.cache = caching.then_some(Cache::Residual { hidden, sum });
        Ok(out)
    }

    fn conv_geom(&self, sample: &[usize], out_sample: &[usize]) -> ConvGeom {
        let LayerSpec::Conv2d { kernel_h, kernel_w, stride, padding, out_channels, .. } = self.spec else {
            unreachable!()
        };
        ConvGeom {
            h: sample[0],
            w: sample[1],
            c: sample[2],
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
            oh: out_sample[0],
            ow: out_sample[1],
            co: out_channels,
        }
    }

    /// Reverse pass for the most recent train-mode forward. Stores parameter
    /// gradients in the layer's [`Param::grad`] slots and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.state.cache.take().ok_or_else(|| {
            Error::Usage(format!("{} backward called without a cached train forward", self.spec.kind()))
        })?;
        let result = self.backward_with(&cache, upstream);
        self.state.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &Cache, upstream: &Tensor) -> Result<Tensor> {
        let expect = |shape: &[usize]| {
            if upstream.shape() == shape {
                Ok(())
            } else {
                Err(shape_err!("{} upstream gradient {:?}, expected {shape:?}", self.spec.kind(), upstream.shape()))
            }
        };
        match (&self.spec, cache) {
            (LayerSpec::Conv2d { .. }, Cache::Input(x)) => {
                let (batch, sample) = split_batch(x)?;
                let out_sample = self.spec.output_shape(&sample)?;
                expect(&with_batch(batch, &out_sample))?;
                let geom = self.conv_geom(&sample, &out_sample);
                let (dx, dw, db) = conv_backward(&geom, x.data(), upstream.data(), batch, &self.state.params[0].value);
                self.state.params[0].grad = Tensor::from_parts(self.state.params[0].value.shape().to_vec(), dw);
                self.state.params[1].grad = Tensor::from_parts(vec![geom.co], db);
                Ok(Tensor::from_parts(x.shape().to_vec(), dx))
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, input_shape }) => {
                if upstream.len() != argmax.len() {
                    return Err(shape_err!(
                        "maxpool2d upstream gradient {:?} does not match forward",
                        upstream.shape()
                    ));
                }
                let mut dx = vec![0.0; input_shape.iter().product()];
                for (&idx, &g) in argmax.iter().zip(upstream.data()) {
                    dx[idx] += g;
                }
                Ok(Tensor::from_parts(input_shape.clone(), dx))
            }
            (LayerSpec::Dense { inputs, units }, Cache::Input(x)) => {
                let (inputs, units) = (*inputs, *units);
                let batch = x.shape()[0];
                expect(&[batch, units])?;
                let mut dw = vec![0.0; inputs * units];
                gemm_at_b(x.data(), upstream.data(), &mut dw, batch, inputs, units);
                let mut db = vec![0.0; units];
                for row in upstream.data().chunks(units) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let mut dx = vec![0.0; batch * inputs];
                gemm_a_bt(upstream.data(), self.state.params[0].value.data(), &mut dx, batch, units, inputs);
                self.state.params[0].grad = Tensor::from_parts(vec![inputs, units], dw);
                self.state.params[1].grad = Tensor::from_parts(vec![units], db);
                Ok(Tensor::from_parts(vec![batch, inputs], dx))
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                expect(x.shape())?;
                let dx = x.data().iter().zip(upstream.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                Ok(Tensor::from_parts(x.shape().to_vec(), dx))
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                if upstream.len() != mask.len() {
                    return Err(shape_err!("dropout upstream gradient {:?} does not match forward", upstream.shape()));
                }
                let dx = upstream.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Ok(Tensor::from_parts(upstream.shape().to_vec(), dx))
            }
            (LayerSpec::Flatten, Cache::Shape(shape)) => {
                if upstream.len() != shape.iter().product::<usize>() {
                    return Err(shape_err!(
                        "flatten upstream gradient {:?} does not match {shape:?}",
                        upstream.shape()
                    ));
                }
                Ok(Tensor::from_parts(shape.clone(), upstream.data().to_vec()))
            }
            (LayerSpec::GlobalAvgPool, Cache::Shape(shape)) => {
                let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                expect(&[batch, c])?;
                let area = (h * w) as f64;
                let mut dx = Vec::with_capacity(batch * h * w * c);
                for g in upstream.data().chunks(c) {
                    for _ in 0..h * w {
                        dx.extend(g.iter().map(|v| v / area));
                    }
                }
                Ok(Tensor::from_parts(shape.clone(), dx))
            }
            (LayerSpec::SoftmaxT { temperature }, Cache::Output(p)) => {
                expect(p.shape())?;
                let classes = p.shape()[1];
                let mut dx = vec![0.0; p.len()];
                for ((prow, grow), drow) in
                    p.data().chunks(classes).zip(upstream.data().chunks(classes)).zip(dx.chunks_mut(classes))
                {
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, &pj), &gj) in drow.iter_mut().zip(prow).zip(grow) {
                        *d = pj * (gj - dot) / temperature;
                    }
                }
                Ok(Tensor::from_parts(p.shape().to_vec(), dx))
            }
            (LayerSpec::ResidualBlock { .. }, Cache::Residual { hidden, sum }) => {
                expect(sum.shape())?;
                let dsum = relu_backward(sum, upstream);
                let [conv1, conv2] = &mut self.state.inner[..] else { unreachable!() };
                let dact = conv2.backward(&dsum)?;
                let dhidden = relu_backward(hidden, &dact);
                let mut dx = conv1.backward(&dhidden)?;
                for (d, s) in dx.data_mut().iter_mut().zip(dsum.data()) {
                    *d += s;
                }
                Ok(dx)
            }
            _ => Err(Error::Usage(format!("{} cache does not match layer", self.spec.kind()))),
        }
    }
}

impl Layer {
    /// Smallest distance of any cached or input activation to a point where the
    /// forward map is not differentiable (ReLU zero, max-pool tie). Infinite for
    /// smooth layers. Needs a train-mode forward on `input` for residual blocks.
    pub(crate) fn kink_distance(&self, input: &Tensor) -> f64 {
        let min_abs = |t: &Tensor| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        match (&self.spec, &self.state.cache) {
            (LayerSpec::Relu, _) => min_abs(input),
            (LayerSpec::MaxPool2d { window, stride }, _) => {
                let s = input.shape();
                let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
                let x = input.data();
                let mut gap = f64::INFINITY;
                for b in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut vals: Vec<f64> = Vec::with_capacity(window * window);
                                for ky in 0..*window {
                                    for kx in 0..*window {
                                        vals.push(x[((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch]);
                                    }
                                }
                                vals.sort_by(|a, b| b.total_cmp(a));
                                if vals.len() > 1 {
                                    gap = gap.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
                gap
            }
            (LayerSpec::ResidualBlock { .. }, Some(Cache::Residual { hidden, sum })) => {
                min_abs(hidden).min(min_abs(sum))
            }
            _ => f64::INFINITY,
        }
    }
}

fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

fn relu_backward(pre: &Tensor, upstream: &Tensor) -> Tensor {
    let d = pre.data().iter().zip(upstream.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_parts(pre.shape().to_vec(), d)
}

fn conv_forward(geom: &ConvGeom, x: &[f64], batch: usize, params: &[Param]) -> Vec<f64> {
    let (k, p, co) = (geom.patch_len(), geom.positions(), geom.co);
    let in_len = geom.h * geom.w * geom.c;
    let weight = params[0].value.data();
    let bias = params[1].value.data();
    let mut out = vec![0.0; batch * p * co];
    out.par_chunks_mut(p * co).zip(x.par_chunks(in_len)).for_each_init(
        || vec![0.0; p * k],
        |cols, (dst, src)| {
            geom.im2col(src, cols);
            gemm(cols, weight, dst, p, k, co);
            for row in dst.chunks_mut(co) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        },
    );
    debug_assert_eq!(batch * p * co, out.len());
    out
}

/// Returns `(dx, dweight, dbias)`. Per-sample partial gradients are reduced in
/// sample order so the result is independent of thread scheduling.
fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    dout: &[f64],
    batch: usize,
    weight: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, p, co) = (geom.patch_len(), geom.positions(), geom.co);
    let in_len = geom.h * geom.w * geom.c;
    let w = weight.data();
    let mut dx = vec![0.0; batch * in_len];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
        .par_chunks_mut(in_len)
        .zip(x.par_chunks(in_len))
        .zip(dout.par_chunks(p * co))
        .map(|((dx_b, x_b), g_b)| {
            let mut cols = vec![0.0; p * k];
            geom.im2col(x_b, &mut cols);
            let mut dw = vec![0.0; k * co];
            gemm_at_b(&cols, g_b, &mut dw, p, k, co);
            let mut db = vec![0.0; co];
            for row in g_b.chunks(co) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            cols.fill(0.0);
            gemm_a_bt(g_b, w, &mut cols, p, co, k);
            geom.col2im(&cols, dx_b);
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0; k * co];
    let mut db = vec![0.0; co];
    for (pw, pb) in &partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn layer(spec: LayerSpec) -> Layer {
        Layer::new(spec, &mut RngState::new(0)).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut l = layer(LayerSpec::Relu);
        let y = l.forward(&t(&[1, 3], &[-2.0, 0.0, 5.0]), Mode::Train, None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 5.0]);
        l.forward(&t(&[1, 2], &[-1.0, 2.0]), Mode::Train, None).unwrap();
        let dx = l.backward(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut l = layer(LayerSpec::MaxPool2d { window: 2, stride: 2 });
        let y = l.forward(&t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), Mode::Train, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        let dx = l.backward(&t(&[1, 1, 1, 1], &[2.5])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut l = layer(LayerSpec::Dropout { rate: 0.25 });
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(l.forward(&x, Mode::Eval, None).unwrap(), x);
        assert_eq!(l.infer(&x).unwrap(), x);
    }

    #[test]
    fn dropout_train_needs_rng_and_scales_survivors() {
        let mut l = layer(LayerSpec::Dropout { rate: 0.25 });
        let x = Tensor::create(&[1, 4000], crate::tensor::Fill::Constant(1.0)).unwrap();
        assert!(matches!(l.forward(&x, Mode::Train, None), Err(Error::Usage(_))));
        let y = l.forward(&x, Mode::Train, Some(&mut RngState::new(3))).unwrap();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 4000.0;
        assert!((dropped - 0.25).abs() < 0.03, "dropped {dropped}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
        let dx = l.backward(&x).unwrap();
        assert_eq!(dx, y);
    }

    #[test]
    fn dense_param_grad_by_chain_rule() {
        let mut l = layer(LayerSpec::Dense { inputs: 1, units: 1 });
        l.params_mut()[0].1.value = t(&[1, 1], &[0.7]);
        l.forward(&t(&[1, 1], &[3.0]), Mode::Train, None).unwrap();
        let dx = l.backward(&t(&[1, 1], &[2.0])).unwrap();
        let params = l.params();
        assert_eq!(params[0].1.grad.data(), &[6.0]);
        assert_eq!(params[1].1.grad.data(), &[2.0]);
        assert!((dx.data()[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn conv_matches_direct_cross_correlation() {
        let mut rng = RngState::new(5);
        let spec =
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 2, stride: 2, padding: 1 };
        let l = Layer::new(spec, &mut rng).unwrap();
        let x =
            Tensor::create(&[2, 5, 6, 2], crate::tensor::Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let y = l.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        let w = &l.params()[0].1.value;
        for b in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    for co in 0..3 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..2 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    acc += x.get(&[b, iy as usize, ix as usize, ci]).unwrap()
                                        * w.get(&[ky, kx, ci, co]).unwrap();
                                }
                            }
                        }
                        let got = y.get(&[b, oy, ox, co]).unwrap();
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let mut l = layer(LayerSpec::Dense { inputs: 2, units: 2 });
        assert!(matches!(l.backward(&t(&[1, 2], &[1.0, 1.0])), Err(Error::Usage(_))));
        l.forward(&t(&[1, 2], &[1.0, 1.0]), Mode::Eval, None).unwrap();
        assert!(matches!(l.backward(&t(&[1, 2], &[1.0, 1.0])), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let l = layer(LayerSpec::Dense { inputs: 3, units: 2 });
        assert!(matches!(l.infer(&t(&[1, 2], &[1.0, 1.0])), Err(Error::Shape(_))));
        let c = layer(LayerSpec::conv(1, 2, 3));
        assert!(matches!(c.infer(&Tensor::zeros(&[1, 2, 2, 1]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut rng = RngState::new(0);
        assert!(Layer::new(LayerSpec::Dropout { rate: 1.0 }, &mut rng).is_err());
        assert!(Layer::new(LayerSpec::MaxPool2d { window: 0, stride: 1 }, &mut rng).is_err());
        assert!(Layer::new(LayerSpec::ResidualBlock { channels: 4, kernel: 2 }, &mut rng).is_err());
        assert!(Layer::new(LayerSpec::SoftmaxT { temperature: 0.0 }, &mut rng).is_err());
    }

    #[test]
    fn zeroed_residual_block_is_relu() {
        let mut l = layer(LayerSpec::ResidualBlock { channels: 2, kernel: 3 });
        for (_, p) in l.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut rng = RngState::new(9);
        let x =
            Tensor::create(&[2, 4, 4, 2], crate::tensor::Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let y = l.infer(&x).unwrap();
        assert_eq!(y, x.max_with(0.0).unwrap());
    }

    #[test]
    fn infer_matches_train_forward_without_dropout() {
        let mut rng = RngState::new(1);
        let mut l = Layer::new(LayerSpec::ResidualBlock { channels: 3, kernel: 3 }, &mut rng).unwrap();
        let x =
            Tensor::create(&[3, 5, 5, 3], crate::tensor::Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let a = l.infer(&x).unwrap();
        let b = l.forward(&x, Mode::Train, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(LayerSpec::conv(3, 16, 3).parameter_count(), 448);
        assert_eq!(LayerSpec::Dense { inputs: 100, units: 2 }.parameter_count(), 202);
        let l = layer(LayerSpec::ResidualBlock { channels: 4, kernel: 3 });
        assert_eq!(l.parameter_count(), l.spec().parameter_count());
    }
}
