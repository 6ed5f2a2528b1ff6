//! Experiment configuration in flat `key = value` form.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos fail loudly.
//!
//! ```text
//! seed                     = 0
//! output_dir               = runs
//! batch_size               = 64
//! teacher.epochs           = 15
//! student.epochs           = 20
//!
//! data.source              = synthetic          # or: directory
//! synth.train_per_class    = 200
//! synth.test_per_class     = 100
//! synth.image_size         = 16
//! synth.noise_std          = 0.2
//! synth.seed               = 1
//! data.train_dir           = path               # directory source only
//! data.test_dir            = path
//! data.height              = 224
//! data.width               = 224
//! data.channels            = 3
//! data.on_decode_error     = skip               # or: fail
//!
//! teacher.preset           = desk               # or: default (224x224x3 sizing)
//! teacher.width / teacher.kernel / teacher.residual_blocks / teacher.stem_stride
//! teacher.dropout / teacher.global_pool
//! student.preset           = desk               # or: default
//! student.conv_widths / student.kernel / student.padding / student.dropout
//!
//! distill.temperature      = 10
//! distill.alpha            = 0.5
//! distill.t_squared_scaling = true
//! distill.hard_term_uses_t = false
//! distill.logits_cache     = path               # optional teacher-logit CSV
//!
//! adam.lr = 0.001   adam.beta1 = 0.9   adam.beta2 = 0.999   adam.eps = 1e-8
//!
//! sweep.temperatures       = 3,5,7,10,20,50,70,90,100
//! sweep.batch_sizes        = 18,32,64,96
//! sweep.parallel           = true
//! ```

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{DecodePolicy, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};
use crate::loss::KdLossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

pub const DEFAULT_TEMPERATURES: [f64; 9] = [3.0, 5.0, 7.0, 10.0, 20.0, 50.0, 70.0, 90.0, 100.0];
pub const DEFAULT_BATCH_SIZES: [usize; 4] = [18, 32, 64, 96];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirSettings {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub policy: DecodePolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSettings),
    Directory(DirSettings),
}

impl DataSource {
    /// `[height, width, channels]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DataSource::Synthetic(s) => [s.image_size, s.image_size, 1],
            DataSource::Directory(d) => [d.height, d.width, d.channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Default,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "default" => Ok(Preset::Default),
            _ => Err(format!("unknown preset {s:?} (expected desk or default)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub data: DataSource,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub distill: KdLossConfig,
    pub logits_cache: Option<PathBuf>,
    pub adam: AdamConfig,
    pub temperatures: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub parallel_sweeps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_kv(&KvMap::new()).expect("defaults are valid")
    }
}

fn cfg<T>(r: Result<T, String>) -> Result<T> {
    r.map_err(Error::Config)
}

fn get<T: FromStr>(kv: &KvMap, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    Ok(cfg(kv.parsed(key))?.unwrap_or(default))
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "batch_size",
    "teacher.epochs",
    "student.epochs",
    "data.source",
    "synth.train_per_class",
    "synth.test_per_class",
    "synth.image_size",
    "synth.noise_std",
    "synth.seed",
    "data.train_dir",
    "data.test_dir",
    "data.height",
    "data.width",
    "data.channels",
    "data.on_decode_error",
    "teacher.preset",
    "teacher.width",
    "teacher.kernel",
    "teacher.residual_blocks",
    "teacher.stem_stride",
    "teacher.dropout",
    "teacher.global_pool",
    "student.preset",
    "student.conv_widths",
    "student.kernel",
    "student.padding",
    "student.dropout",
    "distill.temperature",
    "distill.alpha",
    "distill.t_squared_scaling",
    "distill.hard_term_uses_t",
    "distill.logits_cache",
    "adam.lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "sweep.temperatures",
    "sweep.batch_sizes",
    "sweep.parallel",
];

impl ExperimentConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key {unknown}")));
        }
        let data = match kv.get("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic(SynthSettings {
                train_per_class: get(kv, "synth.train_per_class", 200)?,
                test_per_class: get(kv, "synth.test_per_class", 100)?,
                image_size: get(kv, "synth.image_size", 16)?,
                noise_std: get(kv, "synth.noise_std", 0.2)?,
                seed: get(kv, "synth.seed", 1)?,
            }),
            "directory" => DataSource::Directory(DirSettings {
                train_dir: cfg(kv.required::<PathBuf>("data.train_dir"))?,
                test_dir: cfg(kv.required::<PathBuf>("data.test_dir"))?,
                height: get(kv, "data.height", 224)?,
                width: get(kv, "data.width", 224)?,
                channels: get(kv, "data.channels", 3)?,
                policy: match kv.get("data.on_decode_error").unwrap_or("skip") {
                    "skip" => DecodePolicy::Skip,
                    "fail" => DecodePolicy::FailFast,
                    other => {
                        return Err(Error::Config(format!("data.on_decode_error = {other}: expected skip or fail")))
                    }
                },
            }),
            other => return Err(Error::Config(format!("data.source = {other}: expected synthetic or directory"))),
        };
        let [height, width, channels] = data.image_shape();
        let with_input = |mut m: ModelConfig| {
            m.input_height = height;
            m.input_width = width;
            m.input_channels = channels;
            m.classes = CLASS_NAMES.len();
            m
        };

        let mut teacher = with_input(match get(kv, "teacher.preset", Preset::Desk)? {
            Preset::Desk => ModelConfig::teacher_desk(),
            Preset::Default => ModelConfig::teacher_default(),
        });
        teacher.conv_widths = vec![get(kv, "teacher.width", teacher.conv_widths[0])?];
        teacher.kernel = get(kv, "teacher.kernel", teacher.kernel)?;
        teacher.residual_blocks = get(kv, "teacher.residual_blocks", teacher.residual_blocks)?;
        teacher.stem_stride = get(kv, "teacher.stem_stride", teacher.stem_stride)?;
        teacher.dropout = get(kv, "teacher.dropout", teacher.dropout)?;
        teacher.global_pool = get(kv, "teacher.global_pool", teacher.global_pool)?;

        let mut student = with_input(match get(kv, "student.preset", Preset::Desk)? {
            Preset::Desk => ModelConfig::dsnet_desk(),
            Preset::Default => ModelConfig::dsnet_default(),
        });
        if let Some(widths) = cfg(kv.list("student.conv_widths"))? {
            student.conv_widths = widths;
        }
        student.kernel = get(kv, "student.kernel", student.kernel)?;
        student.padding = get(kv, "student.padding", student.padding)?;
        student.dropout = get(kv, "student.dropout", student.dropout)?;

        let d = KdLossConfig::default();
        let distill = KdLossConfig {
            alpha: get(kv, "distill.alpha", d.alpha)?,
            temperature: get(kv, "distill.temperature", d.temperature)?,
            t_squared_scaling: get(kv, "distill.t_squared_scaling", d.t_squared_scaling)?,
            hard_term_uses_t: get(kv, "distill.hard_term_uses_t", d.hard_term_uses_t)?,
        };
        let a = AdamConfig::default();
        let adam = AdamConfig {
            lr: get(kv, "adam.lr", a.lr)?,
            beta1: get(kv, "adam.beta1", a.beta1)?,
            beta2: get(kv, "adam.beta2", a.beta2)?,
            eps: get(kv, "adam.eps", a.eps)?,
        };

        let config = Self {
            seed: get(kv, "seed", 0)?,
            output_dir: get(kv, "output_dir", PathBuf::from("runs"))?,
            batch_size: get(kv, "batch_size", 64)?,
            teacher_epochs: get(kv, "teacher.epochs", 15)?,
            student_epochs: get(kv, "student.epochs", 20)?,
            data,
            teacher,
            student,
            distill,
            logits_cache: cfg(kv.parsed("distill.logits_cache"))?,
            adam,
            temperatures: cfg(kv.list("sweep.temperatures"))?.unwrap_or_else(|| DEFAULT_TEMPERATURES.to_vec()),
            batch_sizes: cfg(kv.list("sweep.batch_sizes"))?.unwrap_or_else(|| DEFAULT_BATCH_SIZES.to_vec()),
            parallel_sweeps: get(kv, "sweep.parallel", true)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file (if any) and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KvMap::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => KvMap::new(),
        };
        let extra = KvMap::parse(&overrides.join("\n")).map_err(|e| Error::Config(format!("override {e}")))?;
        kv.merge(&extra);
        Self::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_epochs == 0 || self.student_epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.train_per_class == 0 || s.test_per_class == 0 {
                return Err(Error::Config("synthetic datasets need >= 1 image per class".into()));
            }
        }
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()?;
        self.adam.validate()?;
        Ok(())
    }

    /// Canonical text form; `from_kv(&to_kv())` reproduces the config. Presets
    /// are expanded into the fields they set.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("seed", self.seed);
        kv.set("output_dir", self.output_dir.display());
        kv.set("batch_size", self.batch_size);
        kv.set("teacher.epochs", self.teacher_epochs);
        kv.set("student.epochs", self.student_epochs);
        match &self.data {
            DataSource::Synthetic(s) => {
                kv.set("data.source", "synthetic");
                kv.set("synth.train_per_class", s.train_per_class);
                kv.set("synth.test_per_class", s.test_per_class);
                kv.set("synth.image_size", s.image_size);
                kv.set("synth.noise_std", s.noise_std);
                kv.set("synth.seed", s.seed);
            }
            DataSource::Directory(d) => {
                kv.set("data.source", "directory");
                kv.set("data.train_dir", d.train_dir.display());
                kv.set("data.test_dir", d.test_dir.display());
                kv.set("data.height", d.height);
                kv.set("data.width", d.width);
                kv.set("data.channels", d.channels);
                kv.set("data.on_decode_error", if d.policy == DecodePolicy::Skip { "skip" } else { "fail" });
            }
        }
        kv.set("teacher.width", self.teacher.conv_widths[0]);
        kv.set("teacher.kernel", self.teacher.kernel);
        kv.set("teacher.residual_blocks", self.teacher.residual_blocks);
        kv.set("teacher.stem_stride", self.teacher.stem_stride);
        kv.set("teacher.dropout", self.teacher.dropout);
        kv.set("teacher.global_pool", self.teacher.global_pool);
        kv.set("student.conv_widths", join_list(&self.student.conv_widths));
        kv.set("student.kernel", self.student.kernel);
        kv.set("student.padding", self.student.padding);
        kv.set("student.dropout", self.student.dropout);
        kv.set("distill.temperature", self.distill.temperature);
        kv.set("distill.alpha", self.distill.alpha);
        kv.set("distill.t_squared_scaling", self.distill.t_squared_scaling);
        kv.set("distill.hard_term_uses_t", self.distill.hard_term_uses_t);
        if let Some(p) = &self.logits_cache {
            kv.set("distill.logits_cache", p.display());
        }
        kv.set("adam.lr", self.adam.lr);
        kv.set("adam.beta1", self.adam.beta1);
        kv.set("adam.beta2", self.adam.beta2);
        kv.set("adam.eps", self.adam.eps);
        kv.set("sweep.temperatures", join_list(&self.temperatures));
        kv.set("sweep.batch_sizes", join_list(&self.batch_sizes));
        kv.set("sweep.parallel", self.parallel_sweeps);
        kv
    }

    /// SHA-256 (hex) of the canonical text with `exclude`d keys and
    /// bookkeeping keys (output location, sweep lists) removed.
    pub fn hash_excluding(&self, exclude: &[&str]) -> String {
        let mut kv = self.to_kv();
        for key in ["output_dir", "distill.logits_cache", "sweep.temperatures", "sweep.batch_sizes", "sweep.parallel"]
            .iter()
            .chain(exclude)
        {
            kv.remove(key);
        }
        sha256_hex(kv.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
