//! Flat `section.key=value` experiment configs.
//!
//! One assignment per line, `#` starts a comment, lists are comma-separated.
//! Unknown keys are rejected. See `configs/SCHEMA.md` for every key and its
//! default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use mose_core::augment::{AugmentOp, AugmentPolicy};
use mose_core::datastream::{generate_synthetic_split, Dataset, ImageShape, SyntheticSpec};
use mose_core::eval::EvalMode;
use mose_core::losses::{DistillDirection, LossParams};
use mose_core::network::ModelConfig;
use mose_core::optim::AdamConfig;
use mose_core::trainer::{EvalSchedule, ExperimentSpec, Method, TrainConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: file not found")]
    NotFound { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Field { key: String, msg: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

fn field(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        msg: msg.into(),
    }
}

pub const KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.classes",
    "dataset.per_class",
    "dataset.test_per_class",
    "dataset.dim",
    "dataset.spread",
    "dataset.seed",
    "dataset.path",
    "dataset.test_path",
    "dataset.image_shape",
    "stream.tasks",
    "stream.classes_per_task",
    "train.method",
    "train.batch_size",
    "train.buffer_batch",
    "train.memory",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.epochs",
    "augment.enabled",
    "augment.jitter",
    "augment.flip",
    "augment.grayscale",
    "augment.crop",
    "augment.inner_flip",
    "model.experts",
    "model.widths",
    "model.aligned_dim",
    "model.projection_dim",
    "loss.temperature",
    "loss.rsd",
    "loss.direction",
    "loss.student",
    "loss.ce_weight",
    "loss.scl_weight",
    "eval.primary",
    "eval.modes",
    "eval.bof_augment",
    "run.seeds",
    "run.repeat",
    "run.out_dir",
];

/// Keys that select runs or locations rather than what a run computes; they
/// do not enter the config hash.
const UNHASHED: &[&str] = &["run.seeds", "run.repeat", "run.out_dir"];

/// The assignments of a config file, validated only for key names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(field(key, "unknown key"));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("{key} assigned twice"),
                });
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound {
                path: path.display().to_string(),
            },
            _ => ConfigError::Io {
                path: path.display().to_string(),
                source: e,
            },
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(field(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// First 12 hex digits of the SHA-256 of the sorted assignments that
    /// affect results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| field(key, format!("{v:?}: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| field(key, format!("{s:?}: {e}"))))
                    .collect()
            })
            .transpose()
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "on" | "yes" | "1") => Ok(true),
            Some("false" | "off" | "no" | "0") => Ok(false),
            Some(v) => Err(field(key, format!("{v:?} is not a boolean"))),
        }
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.or(key, default)?;
        if v == 0 {
            return Err(field(key, "must be positive"));
        }
        Ok(v)
    }

    fn unit_interval(&self, key: &str) -> Result<Option<f64>> {
        let v = self.parsed::<f64>(key)?;
        if let Some(p) = v {
            if !(0.0..=1.0).contains(&p) {
                return Err(field(key, "must lie in [0, 1]"));
            }
        }
        Ok(v)
    }

    /// Interprets and cross-checks every field; the error names the first
    /// offending key.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let dataset = self.dataset()?;
        let (classes, dim, image_shape) = match &dataset {
            DatasetConfig::Synthetic(s) => (s.spec.class_count, s.spec.dim, None),
            DatasetConfig::File { .. } => (
                self.positive("dataset.classes", 0).map_err(|_| field("dataset.classes", "required for file datasets"))?,
                self.positive("dataset.dim", 0).map_err(|_| field("dataset.dim", "required for file datasets"))?,
                self.image_shape()?,
            ),
        };
        if let Some(shape) = image_shape {
            if shape.len() != dim {
                return Err(field(
                    "dataset.image_shape",
                    format!("{} values per sample, dataset.dim is {dim}", shape.len()),
                ));
            }
        }

        let num_tasks = self.positive("stream.tasks", 5)?;
        let classes_per_task = self.positive("stream.classes_per_task", (classes / num_tasks).max(1))?;
        if num_tasks * classes_per_task > classes {
            return Err(field(
                "stream.classes_per_task",
                format!("{num_tasks} tasks x {classes_per_task} classes exceeds {classes} classes"),
            ));
        }

        let method: Method = self.or("train.method", Method::Mose).map_err(|_| {
            field(
                "train.method",
                format!("expected one of mose, er, scr, buffer-joint; got {:?}", self.get("train.method").unwrap_or("")),
            )
        })?;
        let adam = AdamConfig {
            lr: self.or("train.lr", 1e-3)?,
            beta1: self.or("train.beta1", 0.9)?,
            beta2: self.or("train.beta2", 0.999)?,
            eps: self.or("train.eps", 1e-8)?,
            weight_decay: self.or("train.weight_decay", 1e-4)?,
        };
        if !(adam.lr > 0.0) {
            return Err(field("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&adam.beta1) {
            return Err(field("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&adam.beta2) {
            return Err(field("train.beta2", "must lie in [0, 1)"));
        }
        if !(adam.eps > 0.0) {
            return Err(field("train.eps", "must be positive"));
        }
        if !(adam.weight_decay >= 0.0) {
            return Err(field("train.weight_decay", "must be non-negative"));
        }
        let epochs = self.or("train.epochs", 1usize)?;
        if epochs == 0 && method != Method::BufferJoint {
            return Err(field("train.epochs", "must be at least 1"));
        }

        let augment = self.augment(image_shape.is_some())?;
        let loss = self.loss()?;
        let model = self.model(classes, dim)?;
        if let Some(s) = loss.rsd_student {
            if s >= model.n_experts {
                return Err(field(
                    "loss.student",
                    format!("expert {} does not exist in a {}-expert model", s + 1, model.n_experts),
                ));
            }
        }

        let primary: EvalMode = match self.get("eval.primary") {
            None => method.default_eval_mode(),
            Some(v) => v.parse().map_err(|_| field("eval.primary", format!("unknown mode {v:?}")))?,
        };
        if !primary.is_classifier() {
            return Err(field("eval.primary", format!("{primary} does not assign labels")));
        }
        let extra: Vec<EvalMode> = match self.get("eval.modes") {
            None => Vec::new(),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| field("eval.modes", format!("unknown mode {s:?}"))))
                .collect::<Result<_>>()?,
        };

        let seeds: Vec<u64> = match (self.list::<u64>("run.seeds")?, self.parsed::<usize>("run.repeat")?) {
            (Some(seeds), Some(repeat)) if seeds.len() != repeat => {
                return Err(field(
                    "run.repeat",
                    format!("{repeat} repeats but {} seeds listed", seeds.len()),
                ))
            }
            (Some(seeds), _) if seeds.is_empty() => return Err(field("run.seeds", "empty seed list")),
            (Some(seeds), _) => seeds,
            (None, Some(0)) => return Err(field("run.repeat", "must be positive")),
            (None, Some(repeat)) => (1..=repeat as u64).collect(),
            (None, None) => vec![1],
        };

        let train = TrainConfig {
            method,
            batch_size: self.positive("train.batch_size", 10)?,
            buffer_batch: self.positive("train.buffer_batch", 64)?,
            memory: self.positive("train.memory", 500)?,
            adam,
            epochs,
            augment,
            loss,
            seed: seeds[0],
        };
        let spec = ExperimentSpec {
            train,
            model,
            num_tasks,
            classes_per_task,
            eval: EvalSchedule {
                primary,
                extra,
                bof_augment: self.flag("eval.bof_augment", false)?,
            },
        };
        Ok(ExperimentConfig {
            raw: self.clone(),
            dataset,
            image_shape,
            spec,
            seeds,
            out_dir: PathBuf::from(self.get("run.out_dir").unwrap_or("runs")),
        })
    }

    fn dataset(&self) -> Result<DatasetConfig> {
        match self.get("dataset.kind").unwrap_or("synthetic") {
            "synthetic" => {
                for key in ["dataset.path", "dataset.test_path", "dataset.image_shape"] {
                    if self.get(key).is_some() {
                        return Err(field(key, "only valid for dataset.kind=file"));
                    }
                }
                let spec = SyntheticSpec {
                    class_count: self.or("dataset.classes", 10)?,
                    per_class: self.positive("dataset.per_class", 200)?,
                    dim: self.or("dataset.dim", 32)?,
                    spread: self.or("dataset.spread", 1.0)?,
                    seed: self.or("dataset.seed", 0)?,
                };
                if spec.class_count < 2 {
                    return Err(field("dataset.classes", "need at least 2 classes"));
                }
                if spec.dim < 2 {
                    return Err(field("dataset.dim", "need at least 2 dimensions"));
                }
                if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
                    return Err(field("dataset.spread", "must be finite and non-negative"));
                }
                Ok(DatasetConfig::Synthetic(SyntheticSynth {
                    test_per_class: self.positive("dataset.test_per_class", 100)?,
                    spec,
                }))
            }
            "file" => {
                let path = self.get("dataset.path").ok_or_else(|| field("dataset.path", "required for file datasets"))?;
                let test = self
                    .get("dataset.test_path")
                    .ok_or_else(|| field("dataset.test_path", "required for file datasets"))?;
                Ok(DatasetConfig::File {
                    path: PathBuf::from(path),
                    test_path: PathBuf::from(test),
                })
            }
            other => Err(field("dataset.kind", format!("expected synthetic or file, got {other:?}"))),
        }
    }

    fn image_shape(&self) -> Result<Option<ImageShape>> {
        let Some(dims) = self.list::<usize>("dataset.image_shape")? else {
            return Ok(None);
        };
        match dims[..] {
            [channels, height, width] if channels * height * width > 0 => Ok(Some(ImageShape {
                channels,
                height,
                width,
            })),
            _ => Err(field("dataset.image_shape", "expected three positive values C,H,W")),
        }
    }

    fn augment(&self, has_image: bool) -> Result<Option<AugmentPolicy>> {
        if !self.flag("augment.enabled", true)? {
            for key in ["augment.jitter", "augment.flip", "augment.grayscale", "augment.crop", "augment.inner_flip"] {
                if self.get(key).is_some() {
                    return Err(field(key, "set while augment.enabled=false"));
                }
            }
            return Ok(None);
        }
        let mut ops = Vec::new();
        let image_key = |key: &str| -> Result<()> {
            if has_image {
                Ok(())
            } else {
                Err(field(key, "image augmentation needs dataset.image_shape"))
            }
        };
        if let Some(min_scale) = self.unit_interval("augment.crop")? {
            image_key("augment.crop")?;
            if min_scale == 0.0 {
                return Err(field("augment.crop", "minimum crop scale must be positive"));
            }
            ops.push(AugmentOp::ResizedCrop {
                min_scale,
                max_scale: 1.0,
            });
        }
        if let Some(p) = self.unit_interval("augment.flip")? {
            image_key("augment.flip")?;
            ops.push(AugmentOp::HorizontalFlip { p });
        }
        if let Some(p) = self.unit_interval("augment.grayscale")? {
            image_key("augment.grayscale")?;
            ops.push(AugmentOp::Grayscale { p });
        }
        if let Some(sigma) = self.parsed::<f64>("augment.jitter")? {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(field("augment.jitter", "must be finite and non-negative"));
            }
            ops.push(AugmentOp::GaussianJitter { sigma });
        }
        let inner_flip_doubling = self.flag("augment.inner_flip", false)?;
        if inner_flip_doubling {
            image_key("augment.inner_flip")?;
        }
        Ok(Some(AugmentPolicy {
            ops,
            inner_flip_doubling,
        }))
    }

    fn loss(&self) -> Result<LossParams> {
        let direction = match self.get("loss.direction").unwrap_or("reverse") {
            "reverse" => DistillDirection::Reverse,
            "forward" => DistillDirection::Forward,
            other => return Err(field("loss.direction", format!("expected reverse or forward, got {other:?}"))),
        };
        let rsd_student = match self.parsed::<usize>("loss.student")? {
            None => None,
            Some(0) => return Err(field("loss.student", "experts are numbered from 1")),
            Some(k) => Some(k - 1),
        };
        let params = LossParams {
            temperature: self.or("loss.temperature", 0.07)?,
            rsd_student,
            direction,
            use_rsd: self.flag("loss.rsd", true)?,
            ce_weight: self.or("loss.ce_weight", 1.0)?,
            scl_weight: self.or("loss.scl_weight", 1.0)?,
        };
        if !(params.temperature > 0.0 && params.temperature.is_finite()) {
            return Err(field("loss.temperature", "must be positive"));
        }
        if !(params.ce_weight >= 0.0) {
            return Err(field("loss.ce_weight", "must be non-negative"));
        }
        if !(params.scl_weight >= 0.0) {
            return Err(field("loss.scl_weight", "must be non-negative"));
        }
        Ok(params)
    }

    fn model(&self, class_count: usize, input_dim: usize) -> Result<ModelConfig> {
        let aligned_dim = self.positive("model.aligned_dim", 64)?;
        let projection_dim = self.positive("model.projection_dim", 32)?;
        let widths = self.list::<usize>("model.widths")?;
        let n_experts = match (self.parsed::<usize>("model.experts")?, &widths) {
            (Some(0), _) => return Err(field("model.experts", "must be positive")),
            (Some(n), Some(w)) if w.len() != n => {
                return Err(field(
                    "model.widths",
                    format!("{} widths for {n} experts", w.len()),
                ))
            }
            (Some(n), _) => n,
            (None, Some(w)) => w.len(),
            (None, None) => 4,
        };
        let block_widths = widths.unwrap_or_else(|| vec![aligned_dim; n_experts]);
        if block_widths.contains(&0) {
            return Err(field("model.widths", "widths must be positive"));
        }
        if block_widths.last() != Some(&aligned_dim) {
            return Err(field(
                "model.widths",
                format!("last width must equal model.aligned_dim ({aligned_dim})"),
            ));
        }
        Ok(ModelConfig {
            n_experts,
            block_widths,
            aligned_dim,
            projection_dim,
            class_count,
            input_dim,
            seed: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSynth {
    pub spec: SyntheticSpec,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Synthetic(SyntheticSynth),
    File { path: PathBuf, test_path: PathBuf },
}

/// A fully validated experiment: everything except the per-run seed.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub dataset: DatasetConfig,
    pub image_shape: Option<ImageShape>,
    pub spec: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Train and test sets, checked against the declared class count and
    /// dimension.
    pub fn load_data(&self) -> Result<(Arc<Dataset>, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic(s) => generate_synthetic_split(&s.spec, s.test_per_class)
                .map_err(|e| field("dataset", e.to_string()))?,
            DatasetConfig::File { path, test_path } => {
                let read = |key: &str, p: &Path| -> Result<Dataset> {
                    if !p.exists() {
                        return Err(field(key, format!("{}: file not found", p.display())));
                    }
                    let ds = Dataset::load(p).map_err(|e| field(key, e.to_string()))?;
                    match self.image_shape {
                        Some(shape) => ds.with_image_shape(shape).map_err(|e| field(key, e.to_string())),
                        None => Ok(ds),
                    }
                };
                (read("dataset.path", path)?, read("dataset.test_path", test_path)?)
            }
        };
        for (key, ds) in [("dataset.path", &train), ("dataset.test_path", &test)] {
            if ds.dim() != self.spec.model.input_dim {
                return Err(field(key, format!("dimension {} vs dataset.dim {}", ds.dim(), self.spec.model.input_dim)));
            }
            if ds.class_count != self.spec.model.class_count {
                return Err(field(
                    key,
                    format!("{} classes vs dataset.classes {}", ds.class_count, self.spec.model.class_count),
                ));
            }
        }
        Ok((Arc::new(train), test))
    }

    pub fn spec_for_seed(&self, seed: u64) -> ExperimentSpec {
        let mut spec = self.spec.clone();
        spec.train.seed = seed;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<ExperimentConfig> {
        RawConfig::parse(text)?.resolve()
    }

    fn bad_key(text: &str) -> String {
        match resolve(text) {
            Err(ConfigError::Field { key, .. }) => key,
            other => panic!("expected a field error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_resolve() {
        let cfg = resolve("").unwrap();
        assert_eq!(cfg.spec.train.method, Method::Mose);
        assert_eq!(cfg.spec.model.n_experts, 4);
        assert_eq!(cfg.spec.num_tasks, 5);
        assert_eq!(cfg.spec.classes_per_task, 2);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.spec.eval.primary, EvalMode::FinalExpertNcm);
    }

    #[test]
    fn comments_whitespace_and_lists() {
        let cfg = resolve(
            "# header\n train.method = er  # baseline\nmodel.widths=32, 16\nmodel.aligned_dim=16\nrun.seeds=4,5,6\n",
        )
        .unwrap();
        assert_eq!(cfg.spec.train.method, Method::Er);
        assert_eq!(cfg.spec.model.block_widths, vec![32, 16]);
        assert_eq!(cfg.spec.model.n_experts, 2);
        assert_eq!(cfg.seeds, vec![4, 5, 6]);
        assert_eq!(cfg.spec.eval.primary, EvalMode::FinalLinear);
    }

    #[test]
    fn repeat_expands_to_seed_list() {
        assert_eq!(resolve("run.repeat=3").unwrap().seeds, vec![1, 2, 3]);
        assert_eq!(bad_key("run.repeat=2\nrun.seeds=1,2,3"), "run.repeat");
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(bad_key("train.lr=fast"), "train.lr");
        assert_eq!(bad_key("train.lerning_rate=0.1"), "train.lerning_rate");
        assert_eq!(bad_key("train.method=gdumb"), "train.method");
        assert_eq!(bad_key("stream.tasks=6\nstream.classes_per_task=2"), "stream.classes_per_task");
        assert_eq!(bad_key("model.widths=8,8\nmodel.aligned_dim=16"), "model.widths");
        assert_eq!(bad_key("model.experts=3\nmodel.widths=8,8"), "model.widths");
        assert_eq!(bad_key("loss.student=5"), "loss.student");
        assert_eq!(bad_key("loss.direction=sideways"), "loss.direction");
        assert_eq!(bad_key("augment.flip=0.5"), "augment.flip");
        assert_eq!(bad_key("eval.primary=max-oracle"), "eval.primary");
        assert_eq!(bad_key("train.batch_size=0"), "train.batch_size");
        assert_eq!(bad_key("dataset.kind=file\ndataset.test_path=x"), "dataset.path");
    }

    #[test]
    fn syntax_errors_report_line() {
        assert!(matches!(
            RawConfig::parse("train.lr=0.1\njust words\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RawConfig::parse("train.lr=0.1\ntrain.lr=0.2\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn hash_ignores_seeds_and_order() {
        let a = RawConfig::parse("train.lr=0.01\nmodel.experts=2\nrun.seeds=1,2").unwrap();
        let b = RawConfig::parse("model.experts=2\ntrain.lr=0.01\nrun.seeds=7\nrun.out_dir=elsewhere").unwrap();
        let c = RawConfig::parse("model.experts=3\ntrain.lr=0.01").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn one_based_student_and_disabled_augmentation() {
        let cfg = resolve("loss.student=2\naugment.enabled=false").unwrap();
        assert_eq!(cfg.spec.train.loss.rsd_student, Some(1));
        assert!(cfg.spec.train.augment.is_none());
        assert_eq!(bad_key("augment.enabled=false\naugment.jitter=0.1"), "augment.jitter");
    }

    #[test]
    fn missing_file_is_reported() {
        let err = RawConfig::load(Path::new("/definitely/not/here.cfg")).unwrap_err();
        assert!(err.to_string().contains("file not found"));
    }
}
