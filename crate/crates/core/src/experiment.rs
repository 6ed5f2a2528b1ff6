//! Teacher training, distillation, evaluation, prediction and parameter sweeps.
//!
//! Each `cmd_*` function holds an exclusive lock on its output directory and
//! writes every artifact atomically. The lower-level `train_*` and
//! [`evaluate_model`] functions touch no files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{sha256_hex, DataSource, ExperimentConfig};
use crate::data::{self, Batch, DecodePolicy, LabeledDataset, Split, SynthSpec, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, DirLock};
use crate::layers::Mode;
use crate::loss::{cross_entropy, kd_loss, KdLossConfig};
use crate::metrics::{self, round_centis, MetricsReport, RocPoint};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::optim::{Adam, AdamConfig};
use crate::softmax::{argmax, entropy, softmax_with_temperature, Logits};
use crate::tensor::{RngState, Tensor};

pub const TEACHER_FILE: &str = "teacher.dkpt";
pub const STUDENT_FILE: &str = "student.dkpt";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_CSV_FILE: &str = "roc.csv";
pub const ROC_SVG_FILE: &str = "roc.svg";
pub const SWEEP_JSON_FILE: &str = "sweep.json";
pub const SWEEP_TABLE_FILE: &str = "sweep.txt";
pub const PROBE_FILE: &str = "fig6_probe.csv";

/// Test images fed to the teacher for the softened-probability probe.
pub const PROBE_SIZE: usize = 64;
/// Positive class for ROC and the confusion matrix.
pub const POSITIVE_CLASS: usize = 1;
const INFER_CHUNK: usize = 256;

const TEACHER_INIT_STREAM: u64 = 0x494e_4954_0000_0001;
const STUDENT_INIT_STREAM: u64 = 0x494e_4954_0000_0002;
const DROPOUT_STREAM: u64 = 0x4452_4f50_0000_0000;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_datasets(source: &DataSource) -> Result<Datasets> {
    match source {
        DataSource::Synthetic(s) => {
            let spec = |n, split| SynthSpec {
                n_per_class: n,
                image_size: s.image_size,
                channels: 1,
                noise_std: s.noise_std,
                seed: s.seed,
                split,
            };
            Ok(Datasets {
                train: data::synth_blobs(&spec(s.train_per_class, Split::Train))?,
                test: data::synth_blobs(&spec(s.test_per_class, Split::Test))?,
            })
        }
        DataSource::Directory(d) => {
            let target = (d.height, d.width, d.channels);
            Ok(Datasets {
                train: data::load_image_dataset(&d.train_dir, target, Split::Train, d.policy)?.dataset,
                test: data::load_image_dataset(&d.test_dir, target, Split::Test, d.policy)?.dataset,
            })
        }
    }
}

/// Teacher logits for training batches, either recomputed or looked up.
pub enum TeacherLogits<'a> {
    /// Eval-mode forward pass per batch.
    Live(&'a Model),
    /// Precomputed logits for every training row, indexed by dataset row.
    Cached(Logits),
}

impl TeacherLogits<'_> {
    fn for_batch(&self, batch: &Batch) -> Result<Logits> {
        match self {
            TeacherLogits::Live(model) => model.infer(&batch.images),
            TeacherLogits::Cached(all) => Logits::new(all.values().gather_rows(&batch.indices)?),
        }
    }
}

pub enum Objective<'a> {
    /// Cross-entropy against one-hot labels.
    Hard,
    Distill {
        teacher: &'a TeacherLogits<'a>,
        loss: KdLossConfig,
    },
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
}

/// Mini-batch Adam training. Batch order comes from `(seed, epoch)` and
/// dropout masks from a stream of `seed`, so the run is a pure function of
/// the inputs.
pub fn train(
    model: &mut Model,
    ds: &LabeledDataset,
    settings: &TrainSettings,
    objective: &Objective,
) -> Result<TrainLog> {
    if settings.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if settings.batch_size > ds.len() {
        warn!("batch size {} exceeds {} training samples; using a single batch", settings.batch_size, ds.len());
    }
    let start = Instant::now();
    let mut adam = Adam::new(settings.adam.clone())?;
    let mut dropout_rng = RngState::with_stream(settings.seed, DROPOUT_STREAM);
    let mut log = TrainLog::default();
    for epoch in 0..settings.epochs {
        let diverged = |e: Error| match e {
            Error::Domain(msg) => Error::Divergence(format!("epoch {}: {msg}", epoch + 1)),
            other => other,
        };
        let mut total = 0.0;
        let order = data::batch_indices(ds.len(), settings.batch_size, settings.seed, epoch as u64, true)?;
        for (index, indices) in order.into_iter().enumerate() {
            let batch = Batch::gather(ds, index, indices)?;
            let logits = model.forward(&batch.images, Mode::Train, Some(&mut dropout_rng)).map_err(diverged)?;
            let (loss, grad) = match objective {
                Objective::Hard => cross_entropy(&softmax_with_temperature(&logits, 1.0)?, &batch.labels),
                Objective::Distill { teacher, loss } => {
                    kd_loss(&logits, &teacher.for_batch(&batch)?, &batch.labels, loss).map(|out| (out.loss, out.grad))
                }
            }
            .map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss {loss} in epoch {}", epoch + 1)));
            }
            total += loss * batch.indices.len() as f64;
            model.backward(&grad)?;
            model.apply_adam(&mut adam)?;
        }
        model.clear_caches();
        let mean = total / ds.len() as f64;
        info!("{} epoch {}/{}: loss {mean:.5}", model.kind(), epoch + 1, settings.epochs);
        log.epoch_losses.push(mean);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

fn with_input_shape(cfg: &ModelConfig, ds: &LabeledDataset) -> ModelConfig {
    let [h, w, c] = ds.image_shape();
    ModelConfig { input_height: h, input_width: w, input_channels: c, ..cfg.clone() }
}

pub fn train_teacher(cfg: &ExperimentConfig, train_ds: &LabeledDataset) -> Result<(Model, TrainLog)> {
    let mut model = Model::build(
        &with_input_shape(&cfg.teacher, train_ds),
        &mut RngState::with_stream(cfg.seed, TEACHER_INIT_STREAM),
    )?;
    let settings = TrainSettings {
        epochs: cfg.teacher_epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        adam: cfg.adam.clone(),
    };
    let log = train(&mut model, train_ds, &settings, &Objective::Hard)?;
    Ok((model, log))
}

/// Trains a student on hard labels (`teacher = None`) or by distillation.
pub fn train_student(
    cfg: &ExperimentConfig,
    train_ds: &LabeledDataset,
    teacher: Option<&TeacherLogits>,
    loss: &KdLossConfig,
    batch_size: usize,
) -> Result<(Model, TrainLog)> {
    let mut model = Model::build(
        &with_input_shape(&cfg.student, train_ds),
        &mut RngState::with_stream(cfg.seed, STUDENT_INIT_STREAM),
    )?;
    let settings = TrainSettings { epochs: cfg.student_epochs, batch_size, seed: cfg.seed, adam: cfg.adam.clone() };
    let objective = match teacher {
        Some(teacher) => Objective::Distill { teacher, loss: loss.clone() },
        None => Objective::Hard,
    };
    let log = train(&mut model, train_ds, &settings, &objective)?;
    Ok((model, log))
}

/// Test-split metrics at T = 1, plus the ROC curve when both classes occur.
pub fn evaluate_model(model: &Model, ds: &LabeledDataset) -> Result<(MetricsReport, Option<Vec<RocPoint>>)> {
    let start = Instant::now();
    let logits = model.infer_chunked(&ds.images, INFER_CHUNK)?;
    let probs = softmax_with_temperature(&logits, 1.0)?;
    let predict_seconds = start.elapsed().as_secs_f64();
    let mut report =
        metrics::evaluate_probabilities(&probs, &ds.labels, &ds.class_names, POSITIVE_CLASS, &ds.split.to_string())?;
    report.timing.predict_seconds = round_centis(predict_seconds);
    let scores: Vec<f64> = (0..probs.batch()).map(|i| probs.row(i)[POSITIVE_CLASS]).collect();
    let roc = metrics::roc_curve(&scores, &ds.labels, POSITIVE_CLASS).ok();
    Ok((report, roc))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub kind: String,
    pub parameters: usize,
}

impl ModelSummary {
    fn of(model: &Model) -> Self {
        Self { kind: model.kind().to_string(), parameters: model.parameter_count() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub model: ModelSummary,
    pub teacher: Option<ModelSummary>,
    pub distill: Option<KdSummary>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub config_hash: String,
    pub epoch_losses: Vec<f64>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KdSummary {
    pub temperature: f64,
    pub alpha: f64,
    pub t_squared_scaling: bool,
    pub hard_term_uses_t: bool,
}

impl From<&KdLossConfig> for KdSummary {
    fn from(c: &KdLossConfig) -> Self {
        Self {
            temperature: c.temperature,
            alpha: c.alpha,
            t_squared_scaling: c.t_squared_scaling,
            hard_term_uses_t: c.hard_term_uses_t,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub report: RunReport,
    pub checkpoint: PathBuf,
}

fn write_report(dir: &Path, report: &RunReport, roc: Option<&[RocPoint]>) -> Result<()> {
    write_atomic(&dir.join(REPORT_FILE), to_json(report).as_bytes())?;
    match roc {
        Some(roc) => {
            write_atomic(&dir.join(ROC_CSV_FILE), metrics::roc_csv(roc).as_bytes())?;
            let title = format!("{} ROC ({} split)", report.model.kind, report.metrics.split);
            write_atomic(&dir.join(ROC_SVG_FILE), metrics::roc_svg(roc, &title).as_bytes())?;
        }
        None => warn!("ROC not written: the evaluated split holds a single class"),
    }
    Ok(())
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let data = load_datasets(&cfg.data)?;
    let (model, log) = train_teacher(cfg, &data.train)?;
    let (mut metrics, roc) = evaluate_model(&model, &data.test)?;
    metrics.timing.train_seconds = Some(round_centis(log.seconds));
    let config_hash = cfg.hash_excluding(&[]);
    let checkpoint = cfg.output_dir.join(TEACHER_FILE);
    checkpoint::save_checkpoint(
        &model,
        &CheckpointMeta { epochs: cfg.teacher_epochs, seed: cfg.seed, config_hash: config_hash.clone() },
        &checkpoint,
    )?;
    let report = RunReport {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        command: "train-teacher".into(),
        model: ModelSummary::of(&model),
        teacher: None,
        distill: None,
        seed: cfg.seed,
        epochs: cfg.teacher_epochs,
        batch_size: cfg.batch_size,
        config_hash,
        epoch_losses: log.epoch_losses,
        metrics,
    };
    write_report(&cfg.output_dir, &report, roc.as_deref())?;
    Ok(RunOutcome { model, report, checkpoint })
}

/// Loads a teacher and checks it against the student config and data shape.
pub fn load_teacher(path: &Path, cfg: &ExperimentConfig) -> Result<Model> {
    let (teacher, _) = checkpoint::load_checkpoint(path)?;
    if teacher.kind() != ModelKind::Teacher {
        return Err(Error::Config(format!("{} holds a {}, not a teacher", path.display(), teacher.kind())));
    }
    if teacher.config().classes != cfg.student.classes {
        return Err(Error::Config(format!(
            "teacher has {} classes but the student has {}",
            teacher.config().classes,
            cfg.student.classes
        )));
    }
    if teacher.config().input_shape() != cfg.data.image_shape() {
        return Err(Error::Config(format!(
            "teacher expects {:?} images but the dataset yields {:?}",
            teacher.config().input_shape(),
            cfg.data.image_shape()
        )));
    }
    Ok(teacher)
}

fn dataset_digest(ds: &LabeledDataset) -> String {
    let mut bytes: Vec<u8> = ds.images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    bytes.extend(ds.labels.iter().map(|&y| y as u8));
    sha256_hex(&bytes)
}

/// Reads the teacher-logit cache when its header matches `teacher` and `ds`,
/// otherwise recomputes it and rewrites the file.
///
/// Format: a `# teacher=<sha256> data=<sha256>` line, a `index,logit_0,...`
/// header, then one row per training sample.
pub fn cached_teacher_logits(path: &Path, teacher: &Model, ds: &LabeledDataset) -> Result<Logits> {
    let stamp = format!(
        "# teacher={} data={}",
        sha256_hex(&checkpoint::encode(teacher, &CheckpointMeta::default())),
        dataset_digest(ds)
    );
    if let Ok(text) = std::fs::read_to_string(path) {
        if text.lines().next() == Some(stamp.as_str()) {
            let classes = teacher.config().classes;
            let mut values = Vec::with_capacity(ds.len() * classes);
            for (row, line) in text.lines().skip(2).enumerate() {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != classes + 1 || fields[0] != row.to_string() {
                    return Err(Error::Corruption(format!("{}: malformed row {row}", path.display())));
                }
                for f in &fields[1..] {
                    values.push(f.parse::<f64>().map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?);
                }
            }
            if values.len() == ds.len() * classes {
                info!("using cached teacher logits from {}", path.display());
                return Logits::new(Tensor::from_vec(&[ds.len(), classes], values)?);
            }
            return Err(Error::Corruption(format!("{}: expected {} rows", path.display(), ds.len())));
        }
        info!("teacher logit cache {} is stale; recomputing", path.display());
    }
    let logits = teacher.infer_chunked(&ds.images, INFER_CHUNK)?;
    let mut text = format!("{stamp}\nindex");
    for c in 0..logits.classes() {
        text.push_str(&format!(",logit_{c}"));
    }
    text.push('\n');
    for i in 0..logits.batch() {
        let row: Vec<String> = logits.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{i},{}\n", row.join(",")));
    }
    write_atomic(path, text.as_bytes())?;
    Ok(logits)
}

/// Distills `teacher_path` into a fresh student. The teacher is loaded and
/// checked before anything is written.
pub fn cmd_distill(cfg: &ExperimentConfig, teacher_path: &Path) -> Result<RunOutcome> {
    let teacher = load_teacher(teacher_path, cfg)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let data = load_datasets(&cfg.data)?;
    let source = match &cfg.logits_cache {
        Some(path) => TeacherLogits::Cached(cached_teacher_logits(path, &teacher, &data.train)?),
        None => TeacherLogits::Live(&teacher),
    };
    let (model, log) = train_student(cfg, &data.train, Some(&source), &cfg.distill, cfg.batch_size)?;
    let (mut metrics, roc) = evaluate_model(&model, &data.test)?;
    metrics.timing.train_seconds = Some(round_centis(log.seconds));
    let config_hash = cfg.hash_excluding(&[]);
    let checkpoint = cfg.output_dir.join(STUDENT_FILE);
    checkpoint::save_checkpoint(
        &model,
        &CheckpointMeta { epochs: cfg.student_epochs, seed: cfg.seed, config_hash: config_hash.clone() },
        &checkpoint,
    )?;
    let report = RunReport {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        command: "distill".into(),
        model: ModelSummary::of(&model),
        teacher: Some(ModelSummary::of(&teacher)),
        distill: Some((&cfg.distill).into()),
        seed: cfg.seed,
        epochs: cfg.student_epochs,
        batch_size: cfg.batch_size,
        config_hash,
        epoch_losses: log.epoch_losses,
        metrics,
    };
    write_report(&cfg.output_dir, &report, roc.as_deref())?;
    Ok(RunOutcome { model, report, checkpoint })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub roc: Option<Vec<RocPoint>>,
}

/// Evaluates a checkpoint on one split of the configured dataset and writes
/// `report.json`, `roc.csv` and `roc.svg`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path, split: Split) -> Result<EvalOutcome> {
    let (model, _) = checkpoint::load_checkpoint(checkpoint_path)?;
    if model.config().input_shape() != cfg.data.image_shape() {
        return Err(Error::Config(format!(
            "checkpoint expects {:?} images but the dataset yields {:?}",
            model.config().input_shape(),
            cfg.data.image_shape()
        )));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let data = load_datasets(&cfg.data)?;
    let ds = if split == Split::Train { &data.train } else { &data.test };
    let (report, roc) = evaluate_model(&model, ds)?;
    write_atomic(&cfg.output_dir.join(REPORT_FILE), to_json(&report).as_bytes())?;
    if let Some(roc) = &roc {
        write_atomic(&cfg.output_dir.join(ROC_CSV_FILE), metrics::roc_csv(roc).as_bytes())?;
        let title = format!("{} ROC ({split} split)", model.kind());
        write_atomic(&cfg.output_dir.join(ROC_SVG_FILE), metrics::roc_svg(roc, &title).as_bytes())?;
    } else {
        warn!("ROC not written: the evaluated split holds a single class");
    }
    Ok(EvalOutcome { report, roc })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", CLASS_NAMES[self.label])?;
        for (name, p) in CLASS_NAMES.iter().zip(&self.probabilities) {
            write!(f, "  p({name})={p:.4}")?;
        }
        Ok(())
    }
}

/// Classifies one image file with a T = 1 softmax. Ties go to the lower class.
pub fn cmd_predict(checkpoint_path: &Path, image: &Path) -> Result<Prediction> {
    let (model, _) = checkpoint::load_checkpoint(checkpoint_path)?;
    predict_image(&model, image)
}

pub fn predict_image(model: &Model, image: &Path) -> Result<Prediction> {
    let [h, w, c] = model.config().input_shape();
    let img = data::resize_image(&data::decode_image(image, c)?, h, w)?;
    let logits = model.infer(&img.reshape(&[1, h, w, c])?)?;
    let probs = softmax_with_temperature(&logits, 1.0)?;
    let row = probs.row(0).to_vec();
    Ok(Prediction { label: argmax(&row), probabilities: row })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum SweptValue {
    Temperature(f64),
    BatchSize(usize),
}

impl fmt::Display for SweptValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweptValue::Temperature(t) => write!(f, "{t}"),
            SweptValue::BatchSize(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub value: SweptValue,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub train_seconds: f64,
    pub predict_seconds: f64,
    pub checkpoint: String,
    /// Hash of every config field except the swept one.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub swept: String,
    pub split: String,
    pub teacher_parameters: usize,
    pub student_parameters: usize,
    pub records: Vec<SweepRecord>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>9} {:>9} {:>10}  checkpoint\n",
            self.swept, "accuracy", "auc", "train_s", "predict_s"
        );
        for r in &self.records {
            let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            out.push_str(&format!(
                "{:<12} {:>9.4} {:>9} {:>9.2} {:>10.2}  {}\n",
                r.value.to_string(),
                r.accuracy,
                auc,
                r.train_seconds,
                r.predict_seconds,
                r.checkpoint
            ));
        }
        out
    }
}

/// Mean teacher probabilities at one temperature over the probe batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub temperature: f64,
    /// `benign`, `malignant` (rows of that true class) or `all`.
    pub group: String,
    pub mean_probabilities: Vec<f64>,
    pub mean_entropy: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub probe: Vec<ProbeRow>,
}

/// Softened teacher outputs on the first [`PROBE_SIZE`] test images.
pub fn softened_probe(teacher: &Model, test: &LabeledDataset, temperatures: &[f64]) -> Result<Vec<ProbeRow>> {
    let n = test.len().min(PROBE_SIZE);
    let logits = teacher.infer(&test.images.slice_rows(0, n)?)?;
    let labels = &test.labels[..n];
    let mut rows = Vec::new();
    for &t in temperatures {
        let probs = softmax_with_temperature(&logits, t)?;
        let groups = CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(c, name)| (name.to_string(), Some(c)))
            .chain([("all".to_string(), None)]);
        for (group, class) in groups {
            let members: Vec<usize> = (0..n).filter(|&i| class.is_none_or(|c| labels[i] == c)).collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let mean_probabilities =
                (0..probs.classes()).map(|j| members.iter().map(|&i| probs.row(i)[j]).sum::<f64>() / k).collect();
            let mean_entropy = members.iter().map(|&i| entropy(probs.row(i))).sum::<f64>() / k;
            rows.push(ProbeRow { temperature: t, group, mean_probabilities, mean_entropy });
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("temperature,group");
    for name in CLASS_NAMES {
        out.push_str(&format!(",mean_p_{name}"));
    }
    out.push_str(",mean_entropy\n");
    for r in rows {
        let ps: Vec<String> = r.mean_probabilities.iter().map(|p| p.to_string()).collect();
        out.push_str(&format!("{},{},{},{}\n", r.temperature, r.group, ps.join(","), r.mean_entropy));
    }
    out
}

/// Loads the given teacher, or trains one from `cfg` and saves it in the output directory.
fn sweep_teacher(cfg: &ExperimentConfig, teacher: Option<&Path>, data: &Datasets) -> Result<Model> {
    match teacher {
        Some(path) => load_teacher(path, cfg),
        None => {
            info!("no teacher checkpoint given; training one");
            let (model, _) = train_teacher(cfg, &data.train)?;
            let meta =
                CheckpointMeta { epochs: cfg.teacher_epochs, seed: cfg.seed, config_hash: cfg.hash_excluding(&[]) };
            checkpoint::save_checkpoint(&model, &meta, &cfg.output_dir.join(TEACHER_FILE))?;
            Ok(model)
        }
    }
}

fn run_sweep(
    cfg: &ExperimentConfig,
    teacher: &Model,
    data: &Datasets,
    values: &[SweptValue],
    swept_key: &str,
) -> Result<Vec<SweepRecord>> {
    let config_hash = cfg.hash_excluding(&[swept_key]);
    let source = TeacherLogits::Live(teacher);
    let run = |value: &SweptValue| -> Result<SweepRecord> {
        let (loss, batch_size, file) = match *value {
            SweptValue::Temperature(t) => {
                (KdLossConfig { temperature: t, ..cfg.distill.clone() }, cfg.batch_size, format!("student_T{t}.dkpt"))
            }
            SweptValue::BatchSize(b) => (cfg.distill.clone(), b, format!("student_batch{b}.dkpt")),
        };
        let (model, log) = train_student(cfg, &data.train, Some(&source), &loss, batch_size)?;
        let (metrics, _) = evaluate_model(&model, &data.test)?;
        let meta = CheckpointMeta { epochs: cfg.student_epochs, seed: cfg.seed, config_hash: config_hash.clone() };
        checkpoint::save_checkpoint(&model, &meta, &cfg.output_dir.join(&file))?;
        info!("{swept_key} = {value}: accuracy {:.4}", metrics.accuracy);
        Ok(SweepRecord {
            value: *value,
            accuracy: metrics.accuracy,
            auc: metrics.auc.value,
            train_seconds: round_centis(log.seconds),
            predict_seconds: metrics.timing.predict_seconds,
            checkpoint: file,
            config_hash: config_hash.clone(),
        })
    };
    if cfg.parallel_sweeps {
        values.par_iter().map(run).collect()
    } else {
        values.iter().map(run).collect()
    }
}

fn write_sweep(cfg: &ExperimentConfig, table: &SweepTable) -> Result<()> {
    write_atomic(&cfg.output_dir.join(SWEEP_JSON_FILE), to_json(table).as_bytes())?;
    write_atomic(&cfg.output_dir.join(SWEEP_TABLE_FILE), table.to_text().as_bytes())
}

/// One distillation per temperature in `cfg.temperatures`, same seed and
/// batch order. Also writes the softened-probability probe.
pub fn cmd_sweep_temperature(cfg: &ExperimentConfig, teacher: Option<&Path>) -> Result<SweepOutcome> {
    if cfg.temperatures.is_empty() {
        return Err(Error::Config("temperature list is empty".into()));
    }
    if let Some(t) = cfg.temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    let mut temperatures = cfg.temperatures.clone();
    temperatures.sort_by(f64::total_cmp);
    temperatures.dedup();

    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let data = load_datasets(&cfg.data)?;
    let teacher = sweep_teacher(cfg, teacher, &data)?;
    let probe = softened_probe(&teacher, &data.test, &temperatures)?;
    write_atomic(&cfg.output_dir.join(PROBE_FILE), probe_csv(&probe).as_bytes())?;

    let values: Vec<SweptValue> = temperatures.iter().map(|&t| SweptValue::Temperature(t)).collect();
    let records = run_sweep(cfg, &teacher, &data, &values, "distill.temperature")?;
    let table = sweep_table("temperature", cfg, &teacher, &data, records)?;
    write_sweep(cfg, &table)?;
    Ok(SweepOutcome { table, probe })
}

/// One distillation per batch size in `cfg.batch_sizes` at the configured temperature.
pub fn cmd_sweep_batch(cfg: &ExperimentConfig, teacher: Option<&Path>) -> Result<SweepOutcome> {
    if cfg.batch_sizes.is_empty() {
        return Err(Error::Config("batch size list is empty".into()));
    }
    if cfg.batch_sizes.contains(&0) {
        return Err(Error::Domain("batch sizes must be >= 1".into()));
    }
    let mut sizes = cfg.batch_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();

    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let data = load_datasets(&cfg.data)?;
    let teacher = sweep_teacher(cfg, teacher, &data)?;
    let values: Vec<SweptValue> = sizes.iter().map(|&b| SweptValue::BatchSize(b)).collect();
    let records = run_sweep(cfg, &teacher, &data, &values, "batch_size")?;
    let table = sweep_table("batch_size", cfg, &teacher, &data, records)?;
    write_sweep(cfg, &table)?;
    Ok(SweepOutcome { table, probe: Vec::new() })
}

fn sweep_table(
    swept: &str,
    cfg: &ExperimentConfig,
    teacher: &Model,
    data: &Datasets,
    records: Vec<SweepRecord>,
) -> Result<SweepTable> {
    let student = Model::build(&with_input_shape(&cfg.student, &data.train), &mut RngState::new(0))?;
    Ok(SweepTable {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        swept: swept.into(),
        split: data.test.split.to_string(),
        teacher_parameters: teacher.parameter_count(),
        student_parameters: student.parameter_count(),
        records,
    })
}

#[derive(Debug)]
pub struct SynthExport {
    pub files: usize,
    pub dirs: Vec<PathBuf>,
}

/// Writes the configured synthetic train and test sets as 8-bit PNG files
/// under `out/{train,test}/{benign,malignant}/`, loadable as a directory source.
pub fn cmd_gen_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthExport> {
    let DataSource::Synthetic(_) = &cfg.data else {
        return Err(Error::Config("gen-synth needs data.source = synthetic".into()));
    };
    let _lock = DirLock::acquire(out)?;
    let data = load_datasets(&cfg.data)?;
    let mut files = 0;
    let mut dirs = Vec::new();
    for ds in [&data.train, &data.test] {
        let split_dir = out.join(ds.split.to_string());
        let [h, w, _] = ds.image_shape();
        let per_image = h * w;
        for (i, (img, &y)) in ds.images.data().chunks(per_image).zip(&ds.labels).enumerate() {
            let pixels: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
            let gray = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches extent");
            let mut bytes = std::io::Cursor::new(Vec::new());
            gray.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| Error::Decode(e.to_string()))?;
            write_atomic(&split_dir.join(CLASS_NAMES[y]).join(format!("{i:05}.png")), bytes.get_ref())?;
            files += 1;
        }
        dirs.push(split_dir);
    }
    Ok(SynthExport { files, dirs })
}

/// Decode policy names accepted on the command line.
pub fn parse_policy(s: &str) -> Result<DecodePolicy, String> {
    match s {
        "skip" => Ok(DecodePolicy::Skip),
        "fail" => Ok(DecodePolicy::FailFast),
        _ => Err(format!("unknown decode policy {s:?} (expected skip or fail)")),
    }
}
