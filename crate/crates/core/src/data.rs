//! Dataset ingestion: IDX parsing, task splits, synthetic tasks and the
//! class-balanced calibration memory.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Layout of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    /// Single-channel image stored row-major.
    Image { rows: usize, cols: usize },
    /// Plain feature vector; "rotation" acts on the first two coordinates.
    Vector { dim: usize },
}

impl InputKind {
    pub fn dim(&self) -> usize {
        match *self {
            InputKind::Image { rows, cols } => rows * cols,
            InputKind::Vector { dim } => dim,
        }
    }
}

/// Flat row-major sample matrix with one label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self { dim, x: Vec::new(), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f32], y: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut out = Samples::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }
}

/// Labeled samples with global class ids, before they are split into tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub kind: InputKind,
    pub samples: Samples,
}

/// Samples for one task; labels are local indices into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 0-based position in the task sequence (task id is `index + 1`).
    pub index: usize,
    /// Global class ids, in local-label order.
    pub classes: Vec<usize>,
    pub kind: InputKind,
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
}

impl TaskDataset {
    pub fn id(&self) -> usize {
        self.index + 1
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Parsed IDX image file, pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { offset, message: "truncated header".into() })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected image magic {IMAGE_MAGIC}, found {magic}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: 16 + payload.len().min(expected),
            message: format!(
                "{count} images of {rows}x{cols} need {expected} payload bytes, found {}",
                payload.len()
            ),
        });
    }
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected label magic {LABEL_MAGIC}, found {magic}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Parse {
            offset: 8 + payload.len().min(count),
            message: format!("{count} labels declared, {} payload bytes found", payload.len()),
        });
    }
    Ok(payload.to_vec())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.pixels.iter().map(|&v| to_byte(v)));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label IDX pair.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<LabeledData> {
    let img = parse_idx_images(&read_file(images)?)?;
    let lbl = parse_idx_labels(&read_file(labels)?)?;
    if img.count != lbl.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels ({} / {})",
            img.count,
            lbl.len(),
            images.display(),
            labels.display()
        )));
    }
    Ok(LabeledData {
        kind: InputKind::Image { rows: img.rows, cols: img.cols },
        samples: Samples {
            dim: img.rows * img.cols,
            x: img.pixels,
            y: lbl.into_iter().map(usize::from).collect(),
        },
    })
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledData, LabeledData)> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test =
        load_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

fn class_indices(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y < n_classes {
            by_class[y].push(i);
        }
    }
    by_class
}

/// Splits the classes into consecutive blocks of `classes_per_task`, remaps
/// labels to local indices and moves `val_fraction` of each class's training
/// samples into a validation split.
pub fn make_task_sequence(
    data: &LabeledData,
    classes_per_task: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if classes_per_task == 0 {
        return Err(Error::Config("classes_per_task must be positive".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let n_classes = data.samples.y.iter().max().map_or(0, |&m| m + 1);
    if n_classes == 0 {
        return Err(Error::Empty("no labeled samples"));
    }
    if n_classes % classes_per_task != 0 {
        return Err(Error::Config(format!(
            "{n_classes} classes cannot be split into tasks of {classes_per_task}"
        )));
    }
    let by_class = class_indices(&data.samples.y, n_classes);
    if let Some(missing) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {missing} has no samples")));
    }

    let dim = data.samples.dim;
    let mut tasks = Vec::new();
    for (t, block) in (0..n_classes).collect::<Vec<_>>().chunks(classes_per_task).enumerate() {
        let mut train = Samples::new(dim);
        let mut val = Samples::new(dim);
        for (local, &class) in block.iter().enumerate() {
            let mut idx = by_class[class].clone();
            let mut rng = rng_for(seed, &[stream::SPLIT, class as u64]);
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).round() as usize;
            let (v, tr) = idx.split_at(n_val);
            let (mut v, mut tr) = (v.to_vec(), tr.to_vec());
            v.sort_unstable();
            tr.sort_unstable();
            for &i in &tr {
                train.push(data.samples.row(i), local);
            }
            for &i in &v {
                val.push(data.samples.row(i), local);
            }
        }
        tasks.push(TaskDataset {
            index: t,
            classes: block.to_vec(),
            kind: data.kind,
            train,
            val,
            test: Samples::new(dim),
        });
    }
    Ok(tasks)
}

/// Distributes a held-out test set over an existing task sequence.
pub fn attach_test_split(tasks: &mut [TaskDataset], test: &LabeledData) -> Result<()> {
    let mut owner = BTreeMap::new();
    for task in tasks.iter_mut() {
        if task.kind != test.kind {
            return Err(Error::Data("test data layout differs from training data".into()));
        }
        task.test = Samples::new(test.samples.dim);
        for (local, &c) in task.classes.iter().enumerate() {
            owner.insert(c, (task.index, local));
        }
    }
    for i in 0..test.samples.len() {
        let y = test.samples.y[i];
        let &(t, local) =
            owner.get(&y).ok_or_else(|| Error::Data(format!("test class {y} belongs to no task")))?;
        tasks[t].test.push(test.samples.row(i), local);
    }
    Ok(())
}

/// Parameters of the Gaussian-blob task generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub val_fraction: f64,
    /// Standard deviation of every blob.
    pub sigma: f64,
    /// Distance between neighbouring class means on the 2-D grid.
    pub spacing: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            classes_per_task: 2,
            dim: 16,
            samples_per_class: 200,
            test_per_class: 100,
            val_fraction: 0.1,
            sigma: 0.1,
            spacing: 0.6,
        }
    }
}

/// Gaussian blobs, one per class. Class means sit on a grid in the positive
/// quadrant of the first two coordinates, so a quarter turn of those
/// coordinates moves every sample away from every class mean.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    if spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.samples_per_class == 0 {
        return Err(Error::Config("synthetic task counts must be positive".into()));
    }
    if spec.dim < 2 {
        return Err(Error::Config("synthetic data needs at least two dimensions".into()));
    }
    if !(spec.sigma > 0.0) || !(spec.spacing > 0.0) {
        return Err(Error::Config("synthetic sigma and spacing must be positive".into()));
    }
    let n_classes = spec.n_tasks * spec.classes_per_task;
    let side = (n_classes as f64).sqrt().ceil() as usize;
    let mut mean_rng = rng_for(seed, &[stream::SYNTHETIC, 0]);
    let offset = Normal::new(0.0, spec.spacing).expect("positive spacing");
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; spec.dim];
            m[0] = spec.spacing * (1 + c % side) as f64;
            m[1] = spec.spacing * (1 + c / side) as f64;
            for v in m.iter_mut().skip(2) {
                *v = offset.sample(&mut mean_rng);
            }
            m
        })
        .collect();

    let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let draw = |class: usize, count: usize, purpose: u64| -> Vec<Vec<f32>> {
        let mut rng = rng_for(seed, &[stream::SYNTHETIC, purpose, class as u64]);
        (0..count)
            .map(|_| means[class].iter().map(|&m| (m + noise.sample(&mut rng)) as f32).collect())
            .collect()
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Samples::new(spec.dim);
        let mut val = Samples::new(spec.dim);
        let mut test = Samples::new(spec.dim);
        for (local, &c) in classes.iter().enumerate() {
            let pts = draw(c, spec.samples_per_class, 1);
            let n_val = (spec.samples_per_class as f64 * spec.val_fraction).round() as usize;
            for (i, p) in pts.iter().enumerate() {
                if i < n_val {
                    val.push(p, local);
                } else {
                    train.push(p, local);
                }
            }
            for p in draw(c, spec.test_per_class, 2) {
                test.push(&p, local);
            }
        }
        tasks.push(TaskDataset {
            index: t,
            classes,
            kind: InputKind::Vector { dim: spec.dim },
            train,
            val,
            test,
        });
    }
    Ok(tasks)
}

/// Convenience wrapper with default noise, spacing and split sizes.
pub fn make_synthetic_tasks(
    n_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    let spec = SyntheticSpec {
        n_tasks,
        classes_per_task,
        dim,
        samples_per_class,
        test_per_class: samples_per_class.div_ceil(2),
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed)
}

/// Stored validation samples of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryClass {
    pub global_class: usize,
    pub samples: Vec<f32>,
}

/// Class-balanced calibration memory, keyed by `(task index, local class)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    dim: usize,
    per_class: usize,
    entries: BTreeMap<(usize, usize), MemoryClass>,
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(
        dim: usize,
        per_class: usize,
        entries: BTreeMap<(usize, usize), MemoryClass>,
    ) -> Self {
        Self { dim, per_class, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn entries(&self) -> &BTreeMap<(usize, usize), MemoryClass> {
        &self.entries
    }

    /// Total number of stored samples.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            return 0;
        }
        self.entries.values().map(|c| c.samples.len() / self.dim).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class sample counts keyed by `(task, local class)`.
    pub fn census(&self) -> BTreeMap<(usize, usize), usize> {
        self.entries.iter().map(|(&k, c)| (k, c.samples.len() / self.dim.max(1))).collect()
    }

    /// Every stored sample as `(task, local class, sample)`.
    pub fn iter_samples(&self) -> impl Iterator<Item = (usize, usize, &[f32])> + '_ {
        let dim = self.dim.max(1);
        self.entries
            .iter()
            .flat_map(move |(&(t, c), e)| e.samples.chunks(dim).map(move |s| (t, c, s)))
    }

    /// Adds `per_class` uniformly drawn validation samples for every class of
    /// `task`. Existing entries are not touched.
    pub fn update(&mut self, task: &TaskDataset, per_class: usize, seed: u64) -> Result<()> {
        if per_class == 0 {
            return Ok(());
        }
        if !self.entries.is_empty() && per_class != self.per_class {
            return Err(Error::InvalidInput(format!(
                "memory holds {} samples per class; cannot add {per_class} per class",
                self.per_class
            )));
        }
        if self.entries.keys().any(|&(t, _)| t == task.index) {
            return Err(Error::InvalidInput(format!("task {} already in memory", task.id())));
        }
        let by_class = class_indices(&task.val.y, task.num_classes());
        if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() < per_class) {
            return Err(Error::Data(format!(
                "class {} of task {} has {} validation samples, {per_class} requested",
                task.classes[c],
                task.id(),
                idx.len()
            )));
        }
        self.dim = task.val.dim;
        self.per_class = per_class;
        for (local, idx) in by_class.into_iter().enumerate() {
            let mut idx = idx;
            let mut rng = rng_for(seed, &[stream::MEMORY, task.index as u64, local as u64]);
            idx.shuffle(&mut rng);
            let mut samples = Vec::with_capacity(per_class * self.dim);
            for &i in &idx[..per_class] {
                samples.extend_from_slice(task.val.row(i));
            }
            self.entries
                .insert((task.index, local), MemoryClass { global_class: task.classes[local], samples });
        }
        Ok(())
    }

    /// The first `k` stored samples of every class (a uniform subsample,
    /// since entries are stored in random order).
    pub fn truncated(&self, k: usize) -> MemoryBuffer {
        if k == 0 {
            return MemoryBuffer::new();
        }
        let k = k.min(self.per_class);
        let entries = self
            .entries
            .iter()
            .map(|(&key, c)| {
                (key, MemoryClass { global_class: c.global_class, samples: c.samples[..k * self.dim].to_vec() })
            })
            .collect();
        MemoryBuffer { dim: self.dim, per_class: k, entries }
    }
}

/// Functional form of [`MemoryBuffer::update`].
pub fn update_memory(
    memory: &MemoryBuffer,
    task: &TaskDataset,
    per_class: usize,
    seed: u64,
) -> Result<MemoryBuffer> {
    let mut m = memory.clone();
    m.update(task, per_class, seed)?;
    Ok(m)
}
