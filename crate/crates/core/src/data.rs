//! Labeled image datasets: directory ingestion, bilinear resizing, a synthetic
//! generator, and seeded mini-batching.
//!
//! Images are `[n, height, width, channels]` with pixel values in `[0, 1]`.
//! Labels are `0 = benign`, `1 = malignant`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use crate::error::{shape_err, Error, Result};
use crate::loss::OneHotLabels;
use crate::tensor::{RngState, Tensor};

pub const CLASS_NAMES: [&str; 2] = ["benign", "malignant"];
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Stream id base for per-epoch shuffles; the epoch index is added to it.
pub const SHUFFLE_STREAM: u64 = 0x5348_5546_0000_0000;
const SYNTH_STREAM: u64 = 0x5359_4e54_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!("images must be [n, h, w, c], got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!("{} images but {} labels", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= CLASS_NAMES.len()) {
            return Err(Error::Labeling(format!("label {bad} is not 0 (benign) or 1 (malignant)")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, split, class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[height, width, channels]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { images, labels, split: self.split, class_names: self.class_names.clone() })
    }
}

/// What to do with a file that cannot be decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodePolicy {
    Skip,
    FailFast,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: LabeledDataset,
    pub warnings: Vec<String>,
    /// Files in dataset order.
    pub files: Vec<PathBuf>,
}

/// Decodes one image file into `[h, w, channels]` with values in `[0, 1]`.
/// One channel means luma; three means RGB.
pub fn decode_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
        3 => img.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
        c => return Err(Error::Config(format!("images must have 1 or 3 channels, got {c}"))),
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(&[h, w, channels], data)
}

/// Corner-aligned bilinear resize of an `[h, w, c]` image to `[height, width, c]`.
///
/// Output row `i` samples source row `y = i·(h−1)/(height−1)` (the centre row
/// `(h−1)/2` when `height == 1`), and likewise for columns. With
/// `y0 = floor(y)`, `y1 = min(y0 + 1, h − 1)`, `fy = y − y0` (same for x):
///
/// ```text
/// top    = p(y0,x0) + fx·(p(y0,x1) − p(y0,x0))
/// bottom = p(y1,x0) + fx·(p(y1,x1) − p(y1,x0))
/// out    = top + fy·(bottom − top)
/// ```
pub fn resize_image(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(shape_err!("resize expects [h, w, c], got {:?}", img.shape()));
    }
    if height == 0 || width == 0 {
        return Err(shape_err!("resize target {height}x{width} has a zero extent"));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let pos = if dst == 1 { (src - 1) as f64 / 2.0 } else { (i * (src - 1)) as f64 / (dst - 1) as f64 };
        let lo = (pos.floor() as usize).min(src - 1);
        (lo, (lo + 1).min(src - 1), pos - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|j| coord(j, w, width)).collect();
    let p = img.data();
    let at = |y: usize, x: usize, ch: usize| p[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        let (y0, y1, fy) = coord(i, h, height);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = at(y0, x0, ch) + fx * (at(y0, x1, ch) - at(y0, x0, ch));
                let bottom = at(y1, x0, ch) + fx * (at(y1, x1, ch) - at(y1, x0, ch));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Ok(Tensor::from_parts(vec![height, width, c], out))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/{benign,malignant}/*.{png,ppm,pgm,pnm}`, resizing every image
/// to `target = (height, width, channels)` and scaling to `[0, 1]`.
///
/// Classes come in label order and files in lexicographic path order within
/// each class. Any other subdirectory is a labeling error. Hidden files are
/// ignored.
pub fn load_image_dataset(
    root: &Path,
    target: (usize, usize, usize),
    split: Split,
    policy: DecodePolicy,
) -> Result<LoadOutcome> {
    let (height, width, channels) = target;
    if height == 0 || width == 0 {
        return Err(shape_err!("target size {height}x{width} has a zero extent"));
    }
    for entry in sorted_entries(root)? {
        let name = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if entry.is_dir() && !CLASS_NAMES.contains(&name.as_str()) && !name.starts_with('.') {
            return Err(Error::Labeling(format!(
                "unknown class directory {} (expected benign/ or malignant/)",
                entry.display()
            )));
        }
    }

    let mut warnings = Vec::new();
    let mut warn_and_keep = |msg: String| {
        warn!("{msg}");
        warnings.push(msg);
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            warn_and_keep(format!("class directory {} is missing; no {class} samples", dir.display()));
            continue;
        }
        let mut count = 0;
        for path in sorted_entries(&dir)? {
            let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if hidden || path.is_dir() {
                continue;
            }
            let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
            let decoded = if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                decode_image(&path, channels)
            } else {
                Err(Error::Decode(format!("{}: unsupported image extension", path.display())))
            };
            match decoded {
                Ok(img) => {
                    let resized = resize_image(&img, height, width)?;
                    data.extend(resized.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)));
                    labels.push(label);
                    files.push(path);
                    count += 1;
                }
                Err(e) if policy == DecodePolicy::Skip => warn_and_keep(format!("skipping {}: {e}", path.display())),
                Err(e) => return Err(e),
            }
        }
        if count == 0 {
            warn_and_keep(format!("class directory {} has no images", dir.display()));
        }
    }
    if labels.is_empty() {
        return Err(Error::Labeling(format!("no images found under {}", root.display())));
    }
    let images = Tensor::from_vec(&[labels.len(), height, width, channels], data)?;
    Ok(LoadOutcome { dataset: LabeledDataset::new(images, labels, split)?, warnings, files })
}

/// Parameters of [`synth_blobs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Train and test draw from separate random streams of the same seed.
    pub split: Split,
}

impl SynthSpec {
    pub fn new(n_per_class: usize, image_size: usize, noise_std: f64, seed: u64) -> Self {
        Self { n_per_class, image_size, channels: 1, noise_std, seed, split: Split::Train }
    }

    pub fn with_split(self, split: Split) -> Self {
        Self { split, ..self }
    }
}

const FIELD: f64 = 0.8;
const LESION_DARK: f64 = 0.2;
const HIGHLIGHT: f64 = 1.0;

/// Synthetic two-class lesion images.
///
/// Every image starts as a light field (0.8). Geometry is jittered per image;
/// `s` is the image size and pixel `(y, x)` is tested at its centre
/// `(y + 0.5, x + 0.5)`:
///
/// * benign (0): one dark disk (0.2) centred within `±0.06·s` of the image
///   centre with radius in `[0.15·s, 0.28·s)`.
/// * malignant (1): an irregular blob placed `[0.15·s, 0.25·s)` from the centre
///   at a random angle. It is the union of a main disk (radius `[0.18·s,
///   0.28·s)`) and two lobes (radius `[0.12·s, 0.20·s)`, offset up to `0.12·s`),
///   drawn dark (0.2), with a bright core (1.0) over the inner half of the main
///   disk.
///
/// Gaussian noise `N(0, noise_std)` is then added and pixels clamped to
/// `[0, 1]`. Samples alternate benign, malignant, benign, ...
pub fn synth_blobs(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Domain(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }
    if spec.image_size < 4 || spec.channels == 0 {
        return Err(shape_err!("synthetic images need size >= 4 and channels >= 1"));
    }
    let stream = SYNTH_STREAM + if spec.split == Split::Train { 0 } else { 1 };
    let mut rng = RngState::with_stream(spec.seed, stream);
    let s = spec.image_size;
    let mut data = Vec::with_capacity(2 * spec.n_per_class * s * s * spec.channels);
    let mut labels = Vec::with_capacity(2 * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for label in 0..2 {
            let plane = draw_lesion(label, s, &mut rng);
            for v in plane {
                let noisy = if spec.noise_std > 0.0 { v + rng.normal(0.0, spec.noise_std) } else { v };
                let px = noisy.clamp(0.0, 1.0);
                data.extend(std::iter::repeat_n(px, spec.channels));
            }
            labels.push(label);
        }
    }
    let images = Tensor::from_vec(&[labels.len(), s, s, spec.channels], data)?;
    let ds = LabeledDataset::new(images, labels, spec.split)?;
    let [(lo0, hi0), (lo1, hi1)] = class_mean_ranges(&ds);
    if spec.n_per_class > 1 && lo0.max(lo1) > hi0.min(hi1) {
        warn!(
            "synthetic classes separate on mean intensity: benign [{lo0:.3}, {hi0:.3}], malignant [{lo1:.3}, {hi1:.3}]"
        );
    }
    Ok(ds)
}

struct Disk {
    cy: f64,
    cx: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.r * self.r
    }
}

fn draw_lesion(label: usize, size: usize, rng: &mut RngState) -> Vec<f64> {
    let s = size as f64;
    let mid = s / 2.0;
    let mut plane = vec![FIELD; size * size];
    let pixel_centres = (0..size).flat_map(|y| (0..size).map(move |x| (y, y as f64 + 0.5, x as f64 + 0.5)));
    if label == 0 {
        let disk = Disk {
            cy: mid + rng.uniform(-0.06, 0.06) * s,
            cx: mid + rng.uniform(-0.06, 0.06) * s,
            r: rng.uniform(0.15, 0.28) * s,
        };
        for (i, (_, y, x)) in pixel_centres.enumerate() {
            if disk.contains(y, x) {
                plane[i] = LESION_DARK;
            }
        }
    } else {
        let angle = rng.uniform(0.0, std::f64::consts::TAU);
        let dist = rng.uniform(0.15, 0.25) * s;
        let main = Disk { cy: mid + dist * angle.sin(), cx: mid + dist * angle.cos(), r: rng.uniform(0.18, 0.28) * s };
        let lobes: Vec<Disk> = (0..2)
            .map(|_| Disk {
                cy: main.cy + rng.uniform(-0.12, 0.12) * s,
                cx: main.cx + rng.uniform(-0.12, 0.12) * s,
                r: rng.uniform(0.12, 0.20) * s,
            })
            .collect();
        let core = Disk { r: main.r * 0.5, ..main };
        for (i, (_, y, x)) in pixel_centres.enumerate() {
            if core.contains(y, x) {
                plane[i] = HIGHLIGHT;
            } else if main.contains(y, x) || lobes.iter().any(|d| d.contains(y, x)) {
                plane[i] = LESION_DARK;
            }
        }
    }
    plane
}

/// Per-class `(min, max)` of per-image mean intensity. Classes without
/// samples report `(inf, -inf)`.
pub fn class_mean_ranges(ds: &LabeledDataset) -> [(f64, f64); 2] {
    let per_image = ds.images.len() / ds.len().max(1);
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for (img, &y) in ds.images.data().chunks(per_image).zip(&ds.labels) {
        let mean = img.iter().sum::<f64>() / per_image as f64;
        ranges[y].0 = ranges[y].0.min(mean);
        ranges[y].1 = ranges[y].1.max(mean);
    }
    ranges
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    /// Dataset rows in this batch, in order.
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: OneHotLabels,
}

/// Row order for one epoch, split into batches. The permutation is a pure
/// function of `(seed, epoch)`; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be >= 1".into()));
    }
    if n == 0 {
        return Err(shape_err!("cannot batch an empty dataset"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        RngState::with_stream(seed, SHUFFLE_STREAM.wrapping_add(epoch)).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

impl Batch {
    /// Builds batch `index` from the given dataset rows.
    pub fn gather(ds: &LabeledDataset, index: usize, indices: Vec<usize>) -> Result<Self> {
        let images = ds.images.gather_rows(&indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
        Ok(Self { index, images, labels: OneHotLabels::from_indices(&labels, CLASS_NAMES.len())?, indices })
    }
}

pub fn make_batches(
    ds: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size > ds.len() {
        warn!("batch size {batch_size} exceeds dataset size {}; using a single batch", ds.len());
    }
    batch_indices(ds.len(), batch_size, seed, epoch, shuffle)?
        .into_iter()
        .enumerate()
        .map(|(index, indices)| Batch::gather(ds, index, indices))
        .collect()
}
