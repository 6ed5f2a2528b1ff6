//! The DSNet student, the residual teacher, and parameter accounting.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::kv::{join_list, KvMap};
use crate::layers::{Layer, LayerSpec, Mode, Param};
use crate::optim::Adam;
use crate::softmax::Logits;
use crate::tensor::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teacher" => Ok(ModelKind::Teacher),
            "student" => Ok(ModelKind::Student),
            _ => Err(format!("unknown model kind {s:?}")),
        }
    }
}

/// Architecture hyperparameters for either model.
///
/// The student uses all three `conv_widths`; the teacher uses `conv_widths[0]`
/// as its stem and block width.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub conv_widths: Vec<usize>,
    pub kernel: usize,
    /// Zero padding of every student convolution.
    pub padding: usize,
    pub dropout: f64,
    pub residual_blocks: usize,
    pub stem_stride: usize,
    /// Teacher head: global average pooling, or flatten when false.
    pub global_pool: bool,
}

impl ModelConfig {
    /// DSNet at 224×224×3. 3×3 same-padded convolutions with widths
    /// (32, 48, 128) give 270,898 trainable parameters.
    pub fn dsnet_default() -> Self {
        Self {
            kind: ModelKind::Student,
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            classes: 2,
            conv_widths: vec![32, 48, 128],
            kernel: 3,
            padding: 1,
            dropout: 0.25,
            residual_blocks: 0,
            stem_stride: 1,
            global_pool: false,
        }
    }

    /// DSNet for 16×16 grayscale desk experiments (6,146 parameters).
    pub fn dsnet_desk() -> Self {
        Self {
            input_height: 16,
            input_width: 16,
            input_channels: 1,
            conv_widths: vec![8, 16, 32],
            ..Self::dsnet_default()
        }
    }

    /// Four-block residual teacher with a flatten head for 16×16 grayscale inputs (20,770 parameters).
    pub fn teacher_desk() -> Self {
        Self {
            kind: ModelKind::Teacher,
            input_height: 16,
            input_width: 16,
            input_channels: 1,
            classes: 2,
            conv_widths: vec![16],
            kernel: 3,
            padding: 1,
            dropout: 0.5,
            residual_blocks: 4,
            stem_stride: 2,
            global_pool: false,
        }
    }

    /// Teacher sized for 224×224×3 inputs, with a global-average-pool head.
    pub fn teacher_default() -> Self {
        Self {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            conv_widths: vec![64],
            residual_blocks: 4,
            global_pool: true,
            ..Self::teacher_desk()
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_height, self.input_width, self.input_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_height, self.input_width, self.input_channels, self.kernel, self.stem_stride];
        if dims.contains(&0) || self.conv_widths.contains(&0) {
            return Err(Error::Config(format!("{} extents and widths must be >= 1", self.kind)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.kind {
            ModelKind::Student if self.conv_widths.len() != 3 => {
                Err(Error::Config(format!("DSNet needs exactly 3 conv widths, got {}", self.conv_widths.len())))
            }
            ModelKind::Teacher if self.conv_widths.is_empty() => Err(Error::Config("teacher needs a width".into())),
            ModelKind::Teacher if self.residual_blocks == 0 => {
                Err(Error::Config("teacher needs at least one residual block".into()))
            }
            ModelKind::Teacher if self.kernel.is_multiple_of(2) => {
                Err(Error::Config(format!("teacher kernel {} must be odd", self.kernel)))
            }
            _ => Ok(()),
        }
    }

    /// Layer sequence implied by the config, with shapes checked end to end.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut specs = Vec::new();
        let mut shape = self.input_shape().to_vec();
        let push = |spec: LayerSpec, specs: &mut Vec<LayerSpec>, shape: &mut Vec<usize>| -> Result<()> {
            *shape = spec.output_shape(shape)?;
            specs.push(spec);
            Ok(())
        };
        match self.kind {
            ModelKind::Student => {
                let mut channels = self.input_channels;
                for &width in &self.conv_widths {
                    push(
                        LayerSpec::Conv2d {
                            in_channels: channels,
                            out_channels: width,
                            kernel_h: self.kernel,
                            kernel_w: self.kernel,
                            stride: 1,
                            padding: self.padding,
                        },
                        &mut specs,
                        &mut shape,
                    )?;
                    push(LayerSpec::Relu, &mut specs, &mut shape)?;
                    push(LayerSpec::MaxPool2d { window: 2, stride: 2 }, &mut specs, &mut shape)?;
                    channels = width;
                }
                push(LayerSpec::Flatten, &mut specs, &mut shape)?;
                push(LayerSpec::Dropout { rate: self.dropout }, &mut specs, &mut shape)?;
            }
            ModelKind::Teacher => {
                let width = self.conv_widths[0];
                push(
                    LayerSpec::Conv2d {
                        in_channels: self.input_channels,
                        out_channels: width,
                        kernel_h: self.kernel,
                        kernel_w: self.kernel,
                        stride: self.stem_stride,
                        padding: self.kernel / 2,
                    },
                    &mut specs,
                    &mut shape,
                )?;
                push(LayerSpec::Relu, &mut specs, &mut shape)?;
                for _ in 0..self.residual_blocks {
                    push(LayerSpec::ResidualBlock { channels: width, kernel: self.kernel }, &mut specs, &mut shape)?;
                }
                let head = if self.global_pool { LayerSpec::GlobalAvgPool } else { LayerSpec::Flatten };
                push(head, &mut specs, &mut shape)?;
                push(LayerSpec::Dropout { rate: self.dropout }, &mut specs, &mut shape)?;
            }
        }
        let features = shape[0];
        push(LayerSpec::Dense { inputs: features, units: self.classes }, &mut specs, &mut shape)?;
        Ok(specs)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("kind", self.kind);
        kv.set("input_height", self.input_height);
        kv.set("input_width", self.input_width);
        kv.set("input_channels", self.input_channels);
        kv.set("classes", self.classes);
        kv.set("conv_widths", join_list(&self.conv_widths));
        kv.set("kernel", self.kernel);
        kv.set("padding", self.padding);
        kv.set("dropout", self.dropout);
        kv.set("residual_blocks", self.residual_blocks);
        kv.set("stem_stride", self.stem_stride);
        kv.set("global_pool", self.global_pool);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, String> {
        Ok(Self {
            kind: kv.required("kind")?,
            input_height: kv.required("input_height")?,
            input_width: kv.required("input_width")?,
            input_channels: kv.required("input_channels")?,
            classes: kv.required("classes")?,
            conv_widths: kv.list("conv_widths")?.ok_or("missing key conv_widths")?,
            kernel: kv.required("kernel")?,
            padding: kv.required("padding")?,
            dropout: kv.required("dropout")?,
            residual_blocks: kv.required("residual_blocks")?,
            stem_stride: kv.required("stem_stride")?,
            global_pool: kv.required("global_pool")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

/// Three conv–ReLU–maxpool blocks, flatten, dropout and a dense classifier.
pub fn build_dsnet(cfg: &ModelConfig, rng: &mut RngState) -> Result<Model> {
    if cfg.kind != ModelKind::Student {
        return Err(Error::Config("build_dsnet needs a student config".into()));
    }
    Model::build(cfg, rng)
}

/// Stem conv, residual blocks, global average pool and a dense classifier.
pub fn build_teacher(cfg: &ModelConfig, rng: &mut RngState) -> Result<Model> {
    if cfg.kind != ModelKind::Teacher {
        return Err(Error::Config("build_teacher needs a teacher config".into()));
    }
    Model::build(cfg, rng)
}

pub fn count_parameters(model: &Model) -> usize {
    model.layers.iter().map(|l| l.spec().parameter_count()).sum()
}

impl Model {
    pub fn build(cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let layers = cfg.layer_specs()?.into_iter().map(|spec| Layer::new(spec, rng)).collect::<Result<_>>()?;
        Ok(Self { config: cfg.clone(), layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<&LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape() {
            return Err(shape_err!(
                "{} expects [batch, {}, {}, {}] input, got {s:?}",
                self.config.kind,
                self.config.input_height,
                self.config.input_width,
                self.config.input_channels
            ));
        }
        Ok(())
    }

    /// Forward pass to logits; train mode caches activations and needs `rng` for dropout.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, mut rng: Option<&mut RngState>) -> Result<Logits> {
        self.check_batch(batch)?;
        let mut x = self.layers[0].forward(batch, mode, rng.as_deref_mut())?;
        for layer in &mut self.layers[1..] {
            x = layer.forward(&x, mode, rng.as_deref_mut())?;
        }
        Logits::new(x)
    }

    /// Eval-mode logits through a shared reference.
    pub fn infer(&self, batch: &Tensor) -> Result<Logits> {
        self.check_batch(batch)?;
        let mut x = self.layers[0].infer(batch)?;
        for layer in &self.layers[1..] {
            x = layer.infer(&x)?;
        }
        Logits::new(x)
    }

    /// Eval-mode logits in chunks of `chunk` samples; identical to one big batch.
    pub fn infer_chunked(&self, images: &Tensor, chunk: usize) -> Result<Logits> {
        let n = images.shape()[0];
        let mut rows = Vec::with_capacity(n * self.config.classes);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            rows.extend_from_slice(self.infer(&images.slice_rows(start, end)?)?.values().data());
            start = end;
        }
        Logits::new(Tensor::from_vec(&[n, self.config.classes], rows)?)
    }

    /// Backpropagates a logits gradient, leaving parameter gradients in place.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(())
    }

    /// Parameters named `<layer index>.<name>`, in layer order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn apply_adam(&mut self, adam: &mut Adam) -> Result<()> {
        let mut params = self.params_mut();
        adam.step(params.iter_mut().map(|(name, p)| {
            let Param { value, grad, .. } = &mut **p;
            (name.as_str(), value, &*grad)
        }))
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(self)
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn rng() -> RngState {
        RngState::new(1)
    }

    #[test]
    fn default_dsnet_count_is_pinned() {
        let m = build_dsnet(&ModelConfig::dsnet_default(), &mut rng()).unwrap();
        assert_eq!(count_parameters(&m), 270_898);
        assert!(count_parameters(&m) <= 300_000);
    }

    #[test]
    fn dsnet_layer_order() {
        let m = build_dsnet(&ModelConfig::dsnet_desk(), &mut rng()).unwrap();
        let kinds: Vec<_> = m.specs().iter().map(|s| s.kind()).collect();
        assert_eq!(
            kinds,
            [
                "conv2d",
                "relu",
                "maxpool2d",
                "conv2d",
                "relu",
                "maxpool2d",
                "conv2d",
                "relu",
                "maxpool2d",
                "flatten",
                "dropout",
                "dense"
            ]
        );
        assert_eq!(m.specs()[10], &LayerSpec::Dropout { rate: 0.25 });
    }

    #[test]
    fn desk_dsnet_on_zero_image() {
        let m = build_dsnet(&ModelConfig::dsnet_desk(), &mut rng()).unwrap();
        let logits = m.infer(&Tensor::zeros(&[1, 16, 16, 1]).unwrap()).unwrap();
        assert_eq!(logits.values().shape(), &[1, 2]);
        assert!(logits.values().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_input_is_shape_error() {
        let cfg = ModelConfig { input_height: 4, input_width: 4, ..ModelConfig::dsnet_desk() };
        assert!(matches!(build_dsnet(&cfg, &mut rng()), Err(Error::Shape(_))));
    }

    #[test]
    fn teacher_needs_blocks() {
        let cfg = ModelConfig { residual_blocks: 0, ..ModelConfig::teacher_desk() };
        assert!(matches!(build_teacher(&cfg, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn teacher_outweighs_student() {
        let t = build_teacher(&ModelConfig::teacher_desk(), &mut rng()).unwrap();
        let s = build_dsnet(&ModelConfig::dsnet_desk(), &mut rng()).unwrap();
        assert!(count_parameters(&t) > count_parameters(&s));
        assert_eq!(count_parameters(&s), 6_146);
        assert_eq!(count_parameters(&t), 20_770);
        let t = build_teacher(&ModelConfig::teacher_default(), &mut rng()).unwrap();
        let s = build_dsnet(&ModelConfig::dsnet_default(), &mut rng()).unwrap();
        assert!(count_parameters(&t) > count_parameters(&s));
    }

    #[test]
    fn count_matches_shape_sum() {
        for cfg in [ModelConfig::dsnet_desk(), ModelConfig::teacher_desk()] {
            let m = Model::build(&cfg, &mut rng()).unwrap();
            let recount: usize = m.params().iter().map(|(_, p)| p.value.shape().iter().product::<usize>()).sum();
            assert_eq!(recount, count_parameters(&m));
        }
    }

    #[test]
    fn forward_shape_and_row_independence() {
        let m = build_dsnet(&ModelConfig::dsnet_desk(), &mut rng()).unwrap();
        let mut r = RngState::new(5);
        let x = Tensor::create(&[4, 16, 16, 1], Fill::Uniform { lo: 0.0, hi: 1.0, rng: &mut r }).unwrap();
        let logits = m.infer(&x).unwrap();
        assert_eq!(logits.values().shape(), &[4, 2]);
        assert_eq!(logits, m.infer(&x).unwrap());

        let one = x.slice_rows(1, 2).unwrap();
        let twice = one.gather_rows(&[0, 0]).unwrap();
        let l2 = m.infer(&twice).unwrap();
        assert_eq!(l2.row(0), l2.row(1));
        assert_eq!(l2.row(0), logits.row(1));
    }

    #[test]
    fn config_kv_roundtrip() {
        for cfg in [ModelConfig::dsnet_default(), ModelConfig::teacher_desk()] {
            assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
    }

    #[test]
    fn wrong_input_shape() {
        let m = build_dsnet(&ModelConfig::dsnet_desk(), &mut rng()).unwrap();
        assert!(matches!(m.infer(&Tensor::zeros(&[1, 8, 8, 1]).unwrap()), Err(Error::Shape(_))));
    }
}
