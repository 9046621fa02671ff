//! Class-incremental task streams.
//!
//! A [`Dataset`] is a frozen table of labeled feature rows. [`TaskStream`]
//! partitions its classes into disjoint tasks and hands out each task's rows
//! in seeded, no-replacement batches. Each row is emitted exactly once per
//! task; the final batch may be short.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const DATASET_MAGIC: &[u8; 4] = b"OCL1";

/// Layout of an image-shaped feature vector, stored channel-major (CHW).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    SyntheticGaussian {
        per_class: usize,
        spread: f64,
        seed: u64,
    },
    FileBacked {
        path: String,
    },
}

/// Frozen labeled dataset. Row `i` has sample id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: SourceKind,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn new(
        kind: SourceKind,
        features: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            kind,
            features,
            labels,
            class_count,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image shape {shape:?} does not cover feature dim {}",
                self.dim()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, id: usize) -> LabeledSample {
        LabeledSample {
            id,
            features: self.features.row(id).to_vec(),
            label: self.labels[id],
        }
    }

    /// Gathers rows by sample id into a batch.
    pub fn gather(&self, ids: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            ids: ids.to_vec(),
            image_shape: self.image_shape,
        }
    }

    /// All rows whose label is in `classes`, in id order.
    pub fn subset_for_classes(&self, classes: &[usize]) -> Batch {
        let ids: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.gather(&ids)
    }

    /// Writes the little-endian `OCL1` binary format.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(DATASET_MAGIC)?;
        for v in [self.len(), self.dim(), self.class_count] {
            out.write_all(&to_u32(v)?.to_le_bytes())?;
        }
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            for &x in row {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
            out.write_all(&to_u32(label)?.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads the `OCL1` format; header counts must match the payload exactly.
    pub fn read_from(mut input: impl Read, path_hint: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format("missing OCL1 header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (count, dim, class_count) = (word(4), word(8), word(12));
        if dim == 0 || class_count == 0 {
            return Err(Error::Format("zero feature dim or class count".into()));
        }
        let record = 4 * (dim + 1);
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| Error::Format("header counts overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "header declares {count} samples of dim {dim} ({expected} bytes), file has {}",
                bytes.len()
            )));
        }
        let mut features = Array2::zeros((count, dim));
        let mut labels = Vec::with_capacity(count);
        for (i, rec) in bytes[16..].chunks_exact(record).enumerate() {
            for (j, chunk) in rec[..4 * dim].chunks_exact(4).enumerate() {
                features[[i, j]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            let label = u32::from_le_bytes(rec[4 * dim..].try_into().unwrap()) as usize;
            if label >= class_count {
                return Err(Error::Format(format!(
                    "sample {i} has label {label} but header declares {class_count} classes"
                )));
            }
            labels.push(label);
        }
        Dataset::new(
            SourceKind::FileBacked {
                path: path_hint.to_string(),
            },
            features,
            labels,
            class_count,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), &path.display().to_string())
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

/// Parameters of the seeded Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument("class_count must be at least 2".into()));
        }
        if self.per_class < 1 {
            return Err(Error::InvalidArgument("per_class must be at least 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidArgument("dim must be at least 2".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidArgument(
                "spread must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Class means: standard normal coordinates drawn from the seed.
    pub fn class_means(&self) -> Array2<f64> {
        let mut rng = rng::substream(self.seed, Stream::Means);
        Array2::from_shape_simple_fn((self.class_count, self.dim), || {
            StandardNormal.sample(&mut rng)
        })
    }

    fn draw(&self, means: &Array2<f64>, per_class: usize, stream: Stream) -> Result<Dataset> {
        let mut rng = rng::substream(self.seed, stream);
        let n = self.class_count * per_class;
        let mut features = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.class_count {
            for k in 0..per_class {
                let row = c * per_class + k;
                for j in 0..self.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[[row, j]] = means[[c, j]] + self.spread * z;
                }
                labels.push(c);
            }
        }
        Dataset::new(
            SourceKind::SyntheticGaussian {
                per_class,
                spread: self.spread,
                seed: self.seed,
            },
            features,
            labels,
            self.class_count,
        )
    }
}

/// Seeded Gaussian clusters: `per_class` samples around each class mean.
pub fn generate_synthetic(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let spec = SyntheticSpec {
        class_count,
        per_class,
        dim,
        spread,
        seed,
    };
    spec.validate()?;
    spec.draw(&spec.class_means(), per_class, Stream::Train)
}

/// Train/test pair sharing the same class means. The train half is identical
/// to [`generate_synthetic`] with the same arguments.
pub fn generate_synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if test_per_class < 1 {
        return Err(Error::InvalidArgument("test_per_class must be at least 1".into()));
    }
    let means = spec.class_means();
    let train = spec.draw(&means, spec.per_class, Stream::Train)?;
    let test = spec.draw(&means, test_per_class, Stream::Test)?;
    Ok((train, test))
}

/// A contiguous block of labeled rows. `ids` index into the source dataset
/// (augmented copies keep the id of the row they came from).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub image_shape: Option<ImageShape>,
}

impl Batch {
    pub fn empty(dim: usize, image_shape: Option<ImageShape>) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
            ids: Vec::new(),
            image_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack dim {} onto dim {}",
                other.dim(),
                self.dim()
            )));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("column counts checked");
        Ok(Batch {
            features,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            ids: self.ids.iter().chain(&other.ids).copied().collect(),
            image_shape: self.image_shape.or(other.image_shape),
        })
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            image_shape: self.image_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Zero-based position in the stream.
    pub task_index: usize,
    /// Sorted class ids of this task.
    pub class_set: Vec<usize>,
    /// Emission order of this task's rows.
    pub sample_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Batch(Batch),
    EndOfTask,
}

/// Sequential class-incremental stream. Only the currently open task may be
/// read; once its end-of-task marker is returned the next task opens.
#[derive(Debug, Clone)]
pub struct TaskStream {
    dataset: Arc<Dataset>,
    tasks: Vec<TaskSpec>,
    batch_size: usize,
    current: usize,
    cursor: usize,
}

impl TaskStream {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    /// Index of the open task, or `num_tasks()` once the stream is exhausted.
    pub fn current_task(&self) -> usize {
        self.current
    }

    pub fn is_finished(&self) -> bool {
        self.current >= self.tasks.len()
    }

    pub fn next_batch(&mut self, task_index: usize) -> Result<StreamEvent> {
        if task_index != self.current || self.is_finished() {
            let state = if task_index < self.current {
                "closed"
            } else if task_index < self.tasks.len() {
                "not yet open"
            } else {
                "out of range"
            };
            return Err(Error::ProtocolViolation(format!(
                "task {task_index} is {state} (open task: {})",
                self.current
            )));
        }
        let ids = &self.tasks[task_index].sample_ids;
        if self.cursor >= ids.len() {
            self.current += 1;
            self.cursor = 0;
            return Ok(StreamEvent::EndOfTask);
        }
        let end = (self.cursor + self.batch_size).min(ids.len());
        let batch = self.dataset.gather(&ids[self.cursor..end]);
        self.cursor = end;
        Ok(StreamEvent::Batch(batch))
    }
}

/// Partitions classes into `num_tasks` disjoint groups by a seeded permutation
/// and shuffles each task's rows. Classes beyond `num_tasks * classes_per_task`
/// are left out of the stream.
pub fn build_task_stream(
    dataset: Arc<Dataset>,
    num_tasks: usize,
    classes_per_task: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 {
        return Err(Error::InvalidArgument(
            "num_tasks and classes_per_task must be positive".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let needed = num_tasks * classes_per_task;
    if needed > dataset.class_count {
        return Err(Error::InvalidArgument(format!(
            "{num_tasks} tasks x {classes_per_task} classes needs {needed} classes, dataset has {}",
            dataset.class_count
        )));
    }
    let mut rng = rng::substream(seed, Stream::Data);
    let mut classes: Vec<usize> = (0..dataset.class_count).collect();
    classes.shuffle(&mut rng);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (id, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(id);
    }

    let mut tasks = Vec::with_capacity(num_tasks);
    for (t, chunk) in classes.chunks(classes_per_task).take(num_tasks).enumerate() {
        let class_set: BTreeSet<usize> = chunk.iter().copied().collect();
        let mut sample_ids: Vec<usize> = class_set
            .iter()
            .flat_map(|&c| by_class[c].iter().copied())
            .collect();
        if sample_ids.is_empty() {
            return Err(Error::InvalidArgument(format!("task {t} has no samples")));
        }
        sample_ids.shuffle(&mut rng);
        tasks.push(TaskSpec {
            task_index: t,
            class_set: class_set.into_iter().collect(),
            sample_ids,
        });
    }
    Ok(TaskStream {
        dataset,
        tasks,
        batch_size,
        current: 0,
        cursor: 0,
    })
}
