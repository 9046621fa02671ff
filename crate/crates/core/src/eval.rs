//! Classifiers used at test time and the continual-learning metrics.
//!
//! NCM works on the unit sphere: class means are averages of row-normalized
//! aligned features of buffer exemplars, and test features are normalized
//! before their Euclidean distance to each mean is taken. Classes without
//! buffer exemplars cannot be predicted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datastream::Batch;
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::network::{normalize_rows, ExpertModel, ExpertOutputs};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    dim: usize,
    means: BTreeMap<usize, (Array1<f64>, usize)>,
}

impl ClassMeans {
    /// Means of the row-normalized `features`, grouped by label.
    pub fn from_features(features: ArrayView2<f64>, labels: &[usize]) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows, {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let normed = normalize_rows(features);
        let mut means: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
        for (row, &label) in normed.rows().into_iter().zip(labels) {
            let entry = means
                .entry(label)
                .or_insert_with(|| (Array1::zeros(features.ncols()), 0));
            entry.0 += &row;
            entry.1 += 1;
        }
        for (sum, count) in means.values_mut() {
            *sum /= *count as f64;
        }
        Ok(Self {
            dim: features.ncols(),
            means,
        })
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.means.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        self.means.get(&class).map(|(m, _)| m.view())
    }

    pub fn support(&self, class: usize) -> Option<usize> {
        self.means.get(&class).map(|&(_, n)| n)
    }

    /// Negative Euclidean distance from each normalized row to each class
    /// mean; column `k` is the `k`-th class in ascending id order.
    pub fn scores(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs class-mean dim {}",
                features.ncols(),
                self.dim
            )));
        }
        let normed = normalize_rows(features);
        let mut out = Array2::zeros((features.nrows(), self.means.len()));
        for (k, (mean, _)) in self.means.values().enumerate() {
            for (r, row) in normed.rows().into_iter().enumerate() {
                let d2: f64 = row.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                out[[r, k]] = -d2.sqrt();
            }
        }
        Ok(out)
    }
}

/// Class means of expert `expert`'s aligned features over the un-augmented
/// buffer contents.
pub fn compute_class_means(model: &ExpertModel, buffer: &MemoryBuffer, expert: usize) -> Result<ClassMeans> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if expert >= model.n_experts() {
        return Err(Error::InvalidArgument(format!("no expert {}", expert + 1)));
    }
    let batch = buffer.as_batch();
    let outputs = model.forward_all(batch.features.view())?;
    ClassMeans::from_features(outputs.aligned[expert].view(), &batch.labels)
}

/// Nearest class mean after normalizing `feature`; ties go to the smaller id.
pub fn ncm_predict(feature: ArrayView1<f64>, means: &ClassMeans) -> Result<usize> {
    if means.is_empty() {
        return Err(Error::NoMeans);
    }
    let row = feature.insert_axis(Axis(0));
    let scores = means.scores(row)?;
    Ok(argmax_first(scores.row(0), &means.classes().collect::<Vec<_>>()))
}

fn argmax_first(scores: ArrayView1<f64>, classes: &[usize]) -> usize {
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    classes[best]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    FinalExpertNcm,
    PerExpertNcm,
    MoeNcm,
    /// Per-task best expert; a diagnostic upper reference, not a classifier.
    MaxOracle,
    FinalLinear,
    MoeLinear,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [
        EvalMode::FinalExpertNcm,
        EvalMode::PerExpertNcm,
        EvalMode::MoeNcm,
        EvalMode::MaxOracle,
        EvalMode::FinalLinear,
        EvalMode::MoeLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::FinalExpertNcm => "final-expert-ncm",
            EvalMode::PerExpertNcm => "per-expert-ncm",
            EvalMode::MoeNcm => "moe-ncm",
            EvalMode::MaxOracle => "max-oracle",
            EvalMode::FinalLinear => "final-linear",
            EvalMode::MoeLinear => "moe-linear",
        }
    }

    /// Modes that assign one label per sample.
    pub fn is_classifier(self) -> bool {
        !matches!(self, EvalMode::PerExpertNcm | EvalMode::MaxOracle)
    }

    fn uses_ncm(self) -> bool {
        matches!(
            self,
            EvalMode::FinalExpertNcm | EvalMode::PerExpertNcm | EvalMode::MoeNcm | EvalMode::MaxOracle
        )
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidMode(s.to_string()))
    }
}

/// Frozen snapshot of everything needed to classify: the model, per-expert
/// class means (when an NCM mode is involved) and the candidate classes for
/// linear heads.
pub struct Evaluator<'a> {
    model: &'a ExpertModel,
    means: Vec<ClassMeans>,
    seen_classes: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        model: &'a ExpertModel,
        buffer: &MemoryBuffer,
        modes: &[EvalMode],
        seen_classes: &[usize],
    ) -> Result<Self> {
        let means = if modes.iter().any(|m| m.uses_ncm()) {
            if buffer.is_empty() {
                return Err(Error::EmptyBuffer);
            }
            let batch = buffer.as_batch();
            let outputs = model.forward_all(batch.features.view())?;
            (0..model.n_experts())
                .map(|i| ClassMeans::from_features(outputs.aligned[i].view(), &batch.labels))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut seen = seen_classes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        Ok(Self {
            model,
            means,
            seen_classes: seen,
        })
    }

    pub fn class_means(&self, expert: usize) -> Option<&ClassMeans> {
        self.means.get(expert)
    }

    fn ncm_scores(&self, outputs: &ExpertOutputs, expert: usize) -> Result<Array2<f64>> {
        let means = self.means.get(expert).ok_or(Error::NoMeans)?;
        means.scores(outputs.aligned[expert].view())
    }

    fn ncm_classes(&self) -> Vec<usize> {
        self.means[0].classes().collect()
    }

    fn linear_scores(&self, logits: &Array2<f64>) -> Result<Array2<f64>> {
        if self.seen_classes.is_empty() {
            return Err(Error::InvalidArgument("no candidate classes for linear heads".into()));
        }
        Ok(logits.select(Axis(1), &self.seen_classes))
    }

    fn predict_from(&self, outputs: &ExpertOutputs, mode: EvalMode, expert: Option<usize>) -> Result<Vec<usize>> {
        let n = outputs.n_experts();
        let (scores, classes) = match mode {
            EvalMode::FinalExpertNcm => (self.ncm_scores(outputs, n - 1)?, self.ncm_classes()),
            EvalMode::PerExpertNcm | EvalMode::MaxOracle => {
                let e = expert.ok_or_else(|| Error::InvalidMode(format!("{mode} needs an expert index")))?;
                (self.ncm_scores(outputs, e)?, self.ncm_classes())
            }
            EvalMode::MoeNcm => {
                let mut acc = self.ncm_scores(outputs, 0)?;
                for e in 1..n {
                    acc += &self.ncm_scores(outputs, e)?;
                }
                (acc / n as f64, self.ncm_classes())
            }
            EvalMode::FinalLinear => (self.linear_scores(&outputs.logits[n - 1])?, self.seen_classes.clone()),
            EvalMode::MoeLinear => {
                let mut acc = outputs.logits[0].clone();
                for e in 1..n {
                    acc += &outputs.logits[e];
                }
                (self.linear_scores(&(acc / n as f64))?, self.seen_classes.clone())
            }
        };
        Ok(scores
            .rows()
            .into_iter()
            .map(|row| argmax_first(row, &classes))
            .collect())
    }

    /// Labels predicted by a classifier mode.
    pub fn predict(&self, batch: &Batch, mode: EvalMode) -> Result<Vec<usize>> {
        if !mode.is_classifier() {
            return Err(Error::InvalidMode(format!("{mode} does not assign labels")));
        }
        let outputs = self.model.forward_all(batch.features.view())?;
        self.predict_from(&outputs, mode, None)
    }

    pub fn accuracy(&self, batch: &Batch, mode: EvalMode) -> Result<f64> {
        let predicted = self.predict(batch, mode)?;
        Ok(fraction_correct(&predicted, &batch.labels))
    }

    /// Accuracy of each expert's NCM classifier on `batch`.
    pub fn per_expert_accuracy(&self, batch: &Batch) -> Result<Vec<f64>> {
        let outputs = self.model.forward_all(batch.features.view())?;
        (0..outputs.n_experts())
            .map(|e| {
                let p = self.predict_from(&outputs, EvalMode::PerExpertNcm, Some(e))?;
                Ok(fraction_correct(&p, &batch.labels))
            })
            .collect()
    }

    /// Accuracy rows over `test_sets` (one entry per task). Per-expert mode
    /// yields one row per expert; every other mode a single row.
    pub fn evaluate(&self, test_sets: &[Batch], mode: EvalMode) -> Result<Vec<Vec<f64>>> {
        match mode {
            EvalMode::PerExpertNcm | EvalMode::MaxOracle => {
                let per_task: Vec<Vec<f64>> = test_sets
                    .iter()
                    .map(|b| self.per_expert_accuracy(b))
                    .collect::<Result<_>>()?;
                let n = self.model.n_experts();
                if mode == EvalMode::PerExpertNcm {
                    Ok((0..n).map(|e| per_task.iter().map(|t| t[e]).collect()).collect())
                } else {
                    Ok(vec![per_task
                        .iter()
                        .map(|t| t.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                        .collect()])
                }
            }
            _ => Ok(vec![test_sets
                .iter()
                .map(|b| self.accuracy(b, mode))
                .collect::<Result<_>>()?]),
        }
    }
}

/// One-shot evaluation of `mode` on every test set.
pub fn evaluate(
    model: &ExpertModel,
    test_sets: &[Batch],
    buffer: &MemoryBuffer,
    mode: EvalMode,
    seen_classes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    Evaluator::new(model, buffer, &[mode], seen_classes)?.evaluate(test_sets, mode)
}

fn fraction_correct(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Lower-triangular accuracy table: `a[i][j]` is the accuracy on task `i`
/// after training through task `j` (`i <= j`, zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// `rows[j][i] = a[i][j]`
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from checkpoint rows (row `j` holds `j + 1` entries).
    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn checkpoints(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    /// Appends the evaluation after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.tasks {
            return Err(Error::InvalidArgument("accuracy matrix is already full".into()));
        }
        if row.len() != j + 1 {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {j} needs {} entries, got {}",
                j + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a[t][t]` for every evaluated checkpoint.
    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(j, r)| r[j]).collect()
    }

    /// CSV with one row per checkpoint and one column per task; cells above
    /// the diagonal are empty. Headers and checkpoint labels are one-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for t in 1..=self.tasks {
            out.push_str(&format!(",task_{t}"));
        }
        out.push('\n');
        for (j, row) in self.rows.iter().enumerate() {
            out.push_str(&(j + 1).to_string());
            for t in 0..self.tasks {
                out.push(',');
                if let Some(v) = row.get(t) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let tasks = header.split(',').count().saturating_sub(1);
        if tasks == 0 || !header.starts_with("after_task") {
            return Err(Error::Format(format!("bad header {header:?}")));
        }
        let mut m = Self::new(tasks);
        for (j, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != tasks + 1 {
                return Err(Error::Format(format!("row {} has {} cells", j + 1, cells.len())));
            }
            let row = cells[1..=j.min(tasks - 1) + 1]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| Error::Format(format!("{c:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if cells[j + 2..].iter().any(|c| !c.is_empty()) {
                return Err(Error::Format(format!("row {} fills cells above the diagonal", j + 1)));
            }
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// Final average accuracy and average forgetting of a complete matrix.
///
/// `ACC = mean_t a[t][T]`;
/// `AF = mean_{t<T} (max_{i<=T-1} a[t][i] - a[t][T])`, zero when `T = 1`.
pub fn acc_af(matrix: &AccuracyMatrix) -> Result<(f64, f64)> {
    let t_count = matrix.tasks();
    if t_count == 0 {
        return Err(Error::InvalidArgument("matrix has no tasks".into()));
    }
    for after in 0..t_count {
        for task in 0..=after {
            if matrix.get(task, after).is_none() {
                return Err(Error::IncompleteMatrix { task, after });
            }
        }
    }
    let last = t_count - 1;
    let final_row = &matrix.rows()[last];
    let acc = final_row.iter().sum::<f64>() / t_count as f64;
    if t_count == 1 {
        return Ok((acc, 0.0));
    }
    let mut forgetting = 0.0;
    for task in 0..last {
        let best = (task..last)
            .map(|i| matrix.rows()[i][task])
            .fold(f64::NEG_INFINITY, f64::max);
        forgetting += best - final_row[task];
    }
    Ok((acc, forgetting / last as f64))
}

/// Buffer overfitting factor `(buffer_acc - test_acc) / test_acc`.
pub fn bof(buffer_accuracy: f64, test_accuracy: f64) -> Result<f64> {
    if !(test_accuracy > 0.0) {
        return Err(Error::UndefinedBof);
    }
    Ok((buffer_accuracy - test_accuracy) / test_accuracy)
}
