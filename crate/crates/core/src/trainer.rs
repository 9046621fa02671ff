//! Online training loops: MOSE, the ER and SCR baselines, buffer-only joint
//! training, and the per-task evaluation harness that produces a [`RunRecord`].
//!
//! One step on an incoming batch `B^t`:
//!
//! 1. retrieve `B^M` from the buffer,
//! 2. build `[B^t; Aug(B^t); B^M; Aug(B^M)]` (new rows first),
//! 3. forward every expert, compute the method's loss, backpropagate,
//! 4. take an Adam step,
//! 5. offer the raw `B^t` to the reservoir.
//!
//! Retrieval happens before the update, so a sample can never be replayed in
//! the step it arrives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, double_with_aug, double_with_inner_flip, AugmentPolicy};
use crate::datastream::{build_task_stream, Batch, Dataset, ImageShape, StreamEvent, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{acc_af, bof, AccuracyMatrix, EvalMode, Evaluator};
use crate::losses::{er_loss, mose_loss, scr_loss, BatchSplit, LossConfig, LossParams};
use crate::memory::MemoryBuffer;
use crate::network::{ExpertModel, ModelConfig, OutputGrads};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mose,
    Er,
    Scr,
    /// Fill the buffer from the stream without training, then train on the
    /// buffer alone.
    BufferJoint,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mose, Method::Er, Method::Scr, Method::BufferJoint];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mose => "mose",
            Method::Er => "er",
            Method::Scr => "scr",
            Method::BufferJoint => "buffer-joint",
        }
    }

    /// Classifier used for the accuracy matrix unless configured otherwise.
    pub fn default_eval_mode(self) -> EvalMode {
        match self {
            Method::Mose | Method::Scr => EvalMode::FinalExpertNcm,
            Method::Er | Method::BufferJoint => EvalMode::FinalLinear,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub buffer_batch: usize,
    pub memory: usize,
    pub adam: AdamConfig,
    /// Passes over each task; 1 is the online setting.
    pub epochs: usize,
    /// `None` trains on the plain batch without augmented copies.
    pub augment: Option<AugmentPolicy>,
    pub loss: LossParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Mose,
            batch_size: 10,
            buffer_batch: 64,
            memory: 500,
            adam: AdamConfig::default(),
            epochs: 1,
            augment: Some(AugmentPolicy::identity()),
            loss: LossParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_batch == 0 || self.memory == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, buffer_batch and memory must be positive".into(),
            ));
        }
        if self.epochs == 0 && self.method != Method::BufferJoint {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        if let Some(policy) = &self.augment {
            policy.validate()?;
        }
        Ok(())
    }
}

/// What one optimization step saw and did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub retrieved_ids: Vec<usize>,
    pub batch_rows: usize,
    /// False when the loss had nothing to act on and no update was made.
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Buffer-only training: buffer and test accuracy after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrainRecord {
    pub buffer_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// `None` where test accuracy is zero.
    pub bof: Vec<Option<f64>>,
}

/// Model, buffer, optimizer and RNG streams of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ExpertModel,
    pub buffer: MemoryBuffer,
    optimizer: Adam,
    config: TrainConfig,
    aug_rng: Rng,
    buf_rng: Rng,
    seen: BTreeSet<usize>,
    touches: BTreeMap<usize, u32>,
}

impl Trainer {
    pub fn new(model: ExpertModel, config: TrainConfig, image_shape: Option<ImageShape>) -> Result<Self> {
        config.validate()?;
        let buffer = MemoryBuffer::new(config.memory, model.config().input_dim, image_shape)?;
        let optimizer = Adam::new(config.adam, &model);
        Ok(Self {
            optimizer,
            buffer,
            model,
            aug_rng: rng::substream(config.seed, Stream::Augment),
            buf_rng: rng::substream(config.seed, Stream::Buffer),
            config,
            seen: BTreeSet::new(),
            touches: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.seen.iter().copied().collect()
    }

    /// How many times each stream sample id has been trained on or offered to
    /// the buffer as an incoming sample.
    pub fn touch_counts(&self) -> &BTreeMap<usize, u32> {
        &self.touches
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Marks `classes` as started so they join the seen-class support.
    pub fn begin_task(&mut self, classes: &[usize]) {
        self.seen.extend(classes.iter().copied());
    }

    /// One replay step on `incoming` from a task with classes `current`,
    /// followed by the reservoir update.
    pub fn step(&mut self, incoming: &Batch, current: &[usize]) -> Result<StepReport> {
        self.step_inner(incoming, current, true)
    }

    fn step_inner(&mut self, incoming: &Batch, current: &[usize], update_buffer: bool) -> Result<StepReport> {
        let retrieved = self.buffer.random_retrieve(self.config.buffer_batch, &mut self.buf_rng);
        let new_view = self.view(incoming)?;
        let buf_view = self.view(&retrieved)?;
        let split = BatchSplit { n_new: new_view.len() };
        let batch = new_view.concat(&buf_view)?;
        let (loss, updated) = self.optimize(&batch, split, current)?;
        if update_buffer {
            self.buffer.reservoir_update(incoming, &mut self.buf_rng)?;
        }
        for &id in &incoming.ids {
            *self.touches.entry(id).or_default() += 1;
        }
        Ok(StepReport {
            loss,
            retrieved_ids: retrieved.ids,
            batch_rows: batch.len(),
            updated,
        })
    }

    /// The batch together with its augmented copy (and inner-flip copies when
    /// the policy asks for them).
    fn view(&mut self, batch: &Batch) -> Result<Batch> {
        if batch.is_empty() {
            return Ok(batch.clone());
        }
        match &self.config.augment {
            None => Ok(batch.clone()),
            Some(policy) => {
                let doubled = double_with_aug(batch, policy, &mut self.aug_rng)?;
                if policy.inner_flip_doubling {
                    double_with_inner_flip(&doubled)
                } else {
                    Ok(doubled)
                }
            }
        }
    }

    /// Forward, loss, backward and (if the loss is active) one Adam step on an
    /// already assembled batch. Returns the loss before the update.
    pub fn optimize(&mut self, batch: &Batch, split: BatchSplit, current: &[usize]) -> Result<(f64, bool)> {
        let outputs = self.model.forward_all(batch.features.view())?;
        let n = self.model.n_experts();
        let (value, grads, active) = match self.config.method {
            Method::Mose => {
                let cfg = LossConfig::new(self.config.loss.clone(), current.to_vec(), self.seen_classes())?;
                let loss = mose_loss(&outputs, &batch.labels, split, &cfg)?;
                (loss.total, loss.grads, !batch.is_empty())
            }
            Method::Er | Method::BufferJoint => {
                let loss = er_loss(outputs.logits[n - 1].view(), &batch.labels, &self.seen_classes())?;
                let mut grads = OutputGrads::new(n);
                grads.add_logits(n - 1, loss.grad);
                (loss.value, grads, loss.active)
            }
            Method::Scr => {
                let loss = scr_loss(
                    outputs.projections[n - 1].view(),
                    &batch.labels,
                    self.config.loss.temperature,
                )?;
                let mut grads = OutputGrads::new(n);
                grads.add_projection(n - 1, loss.grad);
                (loss.value, grads, loss.active)
            }
        };
        self.model.zero_grads();
        if active {
            self.model.backward(&outputs, &grads)?;
            self.optimizer.step(&mut self.model)?;
        }
        Ok((value, active))
    }

    /// Consumes the stream's open task. With `epochs > 1` the task's batches
    /// are replayed in arrival order; only the first pass updates the buffer.
    pub fn train_task(&mut self, stream: &mut TaskStream) -> Result<TaskReport> {
        let task = stream.current_task();
        let classes = stream
            .tasks()
            .get(task)
            .ok_or_else(|| Error::ProtocolViolation("stream is exhausted".into()))?
            .class_set
            .clone();
        self.begin_task(&classes);
        let keep = self.config.epochs > 1 && self.config.method != Method::BufferJoint;
        let mut cached = Vec::new();
        let mut losses = Vec::new();
        loop {
            match stream.next_batch(task)? {
                StreamEvent::EndOfTask => break,
                StreamEvent::Batch(batch) => {
                    if self.config.method == Method::BufferJoint {
                        self.buffer.reservoir_update(&batch, &mut self.buf_rng)?;
                        for &id in &batch.ids {
                            *self.touches.entry(id).or_default() += 1;
                        }
                        continue;
                    }
                    losses.push(self.step_inner(&batch, &classes, true)?.loss);
                    if keep {
                        cached.push(batch);
                    }
                }
            }
        }
        for _ in 1..self.config.epochs.max(1) {
            for batch in &cached {
                losses.push(self.step_inner(batch, &classes, false)?.loss);
            }
        }
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        Ok(TaskReport {
            task,
            steps: losses.len(),
            mean_loss,
        })
    }

    /// Supervised training on the buffer contents only, `epochs` shuffled
    /// passes in chunks of `buffer_batch`. After every epoch, records buffer
    /// accuracy (un-augmented unless `augmented_measure`), accuracy on
    /// `test`, and their BOF, using the final linear head over seen classes.
    pub fn buffer_joint_train(
        &mut self,
        epochs: usize,
        test: &Batch,
        augmented_measure: bool,
    ) -> Result<JointTrainRecord> {
        if self.buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut record = JointTrainRecord {
            buffer_accuracy: Vec::with_capacity(epochs),
            test_accuracy: Vec::with_capacity(epochs),
            bof: Vec::with_capacity(epochs),
        };
        let contents = self.buffer.as_batch();
        self.seen.extend(contents.labels.iter().copied());
        let seen = self.seen_classes();
        let saved_method = self.config.method;
        self.config.method = Method::BufferJoint;
        let mut order: Vec<usize> = (0..contents.len()).collect();
        let mut measure_rng = rng::substream(self.config.seed, Stream::Eval);
        for _ in 0..epochs {
            order.shuffle(&mut self.buf_rng);
            for chunk in order.chunks(self.config.buffer_batch) {
                let view = self.view(&contents.select(chunk))?;
                let split = BatchSplit { n_new: view.len() };
                self.optimize(&view, split, &seen)?;
            }
            let measured = match (&self.config.augment, augmented_measure) {
                (Some(policy), true) => augment_batch(&contents, policy, &mut measure_rng)?,
                _ => contents.clone(),
            };
            let ev = Evaluator::new(&self.model, &self.buffer, &[EvalMode::FinalLinear], &seen)?;
            let buf_acc = ev.accuracy(&measured, EvalMode::FinalLinear)?;
            let test_acc = ev.accuracy(test, EvalMode::FinalLinear)?;
            record.buffer_accuracy.push(buf_acc);
            record.test_accuracy.push(test_acc);
            record.bof.push(bof(buf_acc, test_acc).ok());
        }
        self.config.method = saved_method;
        Ok(record)
    }
}

/// Which classifiers to evaluate after each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSchedule {
    /// Fills the main accuracy matrix and drives BOF; must assign labels.
    pub primary: EvalMode,
    /// Extra matrices recorded alongside (per-expert mode gives one per expert).
    pub extra: Vec<EvalMode>,
    /// Measure buffer accuracy on augmented copies for BOF.
    pub bof_augment: bool,
}

impl EvalSchedule {
    pub fn for_method(method: Method) -> Self {
        Self {
            primary: method.default_eval_mode(),
            extra: Vec::new(),
            bof_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train: TrainConfig,
    /// Its `seed` is replaced by one derived from `train.seed`.
    pub model: ModelConfig,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub eval: EvalSchedule,
}

impl ExperimentSpec {
    pub fn validate(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if !self.eval.primary.is_classifier() {
            return Err(Error::InvalidMode(format!(
                "{} cannot be the primary evaluation mode",
                self.eval.primary
            )));
        }
        if train.dim() != self.model.input_dim || test.dim() != self.model.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "model input dim {} vs data dims {} / {}",
                self.model.input_dim,
                train.dim(),
                test.dim()
            )));
        }
        if train.class_count > self.model.class_count || test.class_count != train.class_count {
            return Err(Error::InvalidArgument(format!(
                "model has {} classes, train data {}, test data {}",
                self.model.class_count, train.class_count, test.class_count
            )));
        }
        if let Some(policy) = &self.train.augment {
            let image_ops = policy.ops.iter().any(|op| op.needs_image());
            if (image_ops || policy.inner_flip_doubling) && train.image_shape.is_none() {
                return Err(Error::InvalidArgument(
                    "image augmentations need data with an image shape".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub primary_mode: EvalMode,
    pub task_classes: Vec<Vec<usize>>,
    pub matrix: AccuracyMatrix,
    /// Keyed by mode name; per-expert matrices are keyed `per-expert-ncm:<k>`
    /// with one-based `k`.
    pub extra_matrices: BTreeMap<String, AccuracyMatrix>,
    pub acc: f64,
    pub af: f64,
    pub new_task_accuracy: Vec<f64>,
    /// Mean old-task BOF after each task; `None` where no old task has a
    /// defined value (always for the first task).
    pub bof: Vec<Option<f64>>,
    pub joint: Option<JointTrainRecord>,
    pub task_reports: Vec<TaskReport>,
    pub stream_samples: usize,
    pub samples_touched: u64,
    pub max_touches: u32,
    pub task_seconds: Vec<f64>,
    pub config: ExperimentSpec,
}

impl RunRecord {
    /// The record with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.task_seconds.iter_mut().for_each(|s| *s = 0.0);
        r
    }

    /// Accuracy matrix for an evaluation mode name, primary included.
    pub fn matrix_for(&self, mode: &str) -> Option<&AccuracyMatrix> {
        if mode == self.primary_mode.name() {
            Some(&self.matrix)
        } else {
            self.extra_matrices.get(mode)
        }
    }
}

/// Trains on the class-incremental stream built from `train` and evaluates on
/// `test` after every task.
pub fn run_experiment(spec: &ExperimentSpec, train: Arc<Dataset>, test: &Dataset) -> Result<RunRecord> {
    spec.validate(&train, test)?;
    let mut model_cfg = spec.model.clone();
    model_cfg.seed = rng::derive(spec.train.seed, Stream::Init);
    let mut config = spec.clone();
    config.model = model_cfg.clone();

    let mut stream = build_task_stream(
        train.clone(),
        spec.num_tasks,
        spec.classes_per_task,
        spec.train.batch_size,
        spec.train.seed,
    )?;
    let task_classes: Vec<Vec<usize>> = stream.tasks().iter().map(|t| t.class_set.clone()).collect();
    let stream_samples = stream.tasks().iter().map(|t| t.sample_ids.len()).sum();
    let test_sets: Vec<Batch> = task_classes.iter().map(|c| test.subset_for_classes(c)).collect();

    let mut trainer = Trainer::new(ExpertModel::new(model_cfg)?, spec.train.clone(), train.image_shape)?;
    let mut eval_rng = rng::substream(spec.train.seed, Stream::Eval);
    let t_count = spec.num_tasks;
    let primary = spec.eval.primary;
    let mut modes = vec![primary];
    modes.extend(spec.eval.extra.iter().copied().filter(|m| *m != primary));

    let mut matrix = AccuracyMatrix::new(t_count);
    let mut extra: BTreeMap<String, AccuracyMatrix> = BTreeMap::new();
    let mut bof_series = Vec::with_capacity(t_count);
    let mut task_reports = Vec::with_capacity(t_count);
    let mut task_seconds = Vec::with_capacity(t_count);
    let mut joint = None;

    for t in 0..t_count {
        let started = Instant::now();
        task_reports.push(trainer.train_task(&mut stream)?);
        if spec.train.method == Method::BufferJoint && t + 1 == t_count {
            let all_test = test_sets.iter().skip(1).try_fold(test_sets[0].clone(), |acc, b| acc.concat(b))?;
            joint = Some(trainer.buffer_joint_train(spec.train.epochs, &all_test, spec.eval.bof_augment)?);
        }
        task_seconds.push(started.elapsed().as_secs_f64());

        let seen = trainer.seen_classes();
        let ev = Evaluator::new(&trainer.model, &trainer.buffer, &modes, &seen)?;
        let seen_tests = &test_sets[..=t];
        let row = ev.evaluate(seen_tests, primary)?.remove(0);
        for &mode in &modes[1..] {
            let rows = ev.evaluate(seen_tests, mode)?;
            let single = rows.len() == 1 && mode != EvalMode::PerExpertNcm;
            for (k, r) in rows.into_iter().enumerate() {
                let key = if single {
                    mode.name().to_string()
                } else {
                    format!("{}:{}", mode.name(), k + 1)
                };
                extra
                    .entry(key)
                    .or_insert_with(|| AccuracyMatrix::new(t_count))
                    .push_row(r)?;
            }
        }

        let mut defined = Vec::new();
        if t > 0 {
            let stored = trainer.buffer.as_batch();
            for (i, classes) in task_classes[..t].iter().enumerate() {
                let rows: Vec<usize> = (0..stored.len()).filter(|&r| classes.contains(&stored.labels[r])).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut old = stored.select(&rows);
                if spec.eval.bof_augment {
                    if let Some(policy) = &spec.train.augment {
                        old = augment_batch(&old, policy, &mut eval_rng)?;
                    }
                }
                let buf_acc = ev.accuracy(&old, primary)?;
                if let Ok(v) = bof(buf_acc, row[i]) {
                    defined.push(v);
                }
            }
        }
        bof_series.push(if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        });
        matrix.push_row(row)?;
    }

    let (acc, af) = acc_af(&matrix)?;
    let touches = trainer.touch_counts();
    Ok(RunRecord {
        method: spec.train.method,
        seed: spec.train.seed,
        primary_mode: primary,
        task_classes,
        new_task_accuracy: matrix.diagonal(),
        matrix,
        extra_matrices: extra,
        acc,
        af,
        bof: bof_series,
        joint,
        task_reports,
        stream_samples,
        samples_touched: touches.values().map(|&c| c as u64).sum(),
        max_touches: touches.values().copied().max().unwrap_or(0),
        task_seconds,
        config,
    })
}
