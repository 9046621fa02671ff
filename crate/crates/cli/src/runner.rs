//! Executes configs and writes run artifacts.
//!
//! Every run lands in `<root>/<config hash>-seed<k>/`:
//!
//! - `summary.json`: config hash, the flat config, ACC/AF and the full run record
//! - `matrix.csv`: the primary accuracy matrix
//! - `matrix_<mode>.csv`: one per extra evaluation mode
//! - `bof.csv`: mean old-task BOF after each task
//!
//! All runs of an invocation are validated and executed before anything is
//! written, so a bad config or a failing run leaves no partial output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mose_core::trainer::{run_experiment, RunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, RawConfig};

pub const OUT_DIR_ENV: &str = "OCL_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run failed: {0}")]
    Core(#[from] mose_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub acc: f64,
    pub af: f64,
    pub record: RunRecord,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
}

/// `OCL_OUT_DIR` when set, otherwise the config's `run.out_dir`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.out_dir.clone(),
    }
}

pub fn run_dir_name(hash: &str, seed: u64) -> String {
    format!("{hash}-seed{seed}")
}

/// Runs every seed of a resolved config without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<Summary>> {
    let (train, test) = cfg.load_data()?;
    let hash = cfg.raw.hash();
    let config = cfg.raw.entries().clone();
    // surface spec/data mismatches before spending time on any seed
    cfg.spec.validate(&train, &test)?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let record = run_experiment(&cfg.spec_for_seed(seed), train.clone(), &test)?;
            Ok(Summary {
                config_hash: hash.clone(),
                seed,
                config: config.clone(),
                acc: record.acc,
                af: record.af,
                record,
            })
        })
        .collect()
}

pub fn write_run(root: &Path, summary: &Summary) -> Result<PathBuf> {
    let dir = root.join(run_dir_name(&summary.config_hash, summary.seed));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let json = serde_json::to_string_pretty(summary).expect("run records serialize");
    write(&dir.join("summary.json"), json + "\n")?;
    let record = &summary.record;
    write(&dir.join("matrix.csv"), record.matrix.to_csv())?;
    for (mode, matrix) in &record.extra_matrices {
        let name = format!("matrix_{}.csv", mode.replace(':', "_"));
        write(&dir.join(name), matrix.to_csv())?;
    }
    let mut bof = String::from("after_task,bof\n");
    for (t, v) in record.bof.iter().enumerate() {
        match v {
            Some(v) => bof.push_str(&format!("{},{v}\n", t + 1)),
            None => bof.push_str(&format!("{},\n", t + 1)),
        }
    }
    write(&dir.join("bof.csv"), bof)?;
    Ok(dir)
}

/// `mose run`: every seed of the config, one directory each.
pub fn run(config_path: &Path) -> Result<Vec<RunOutput>> {
    let cfg = RawConfig::load(config_path)?.resolve()?;
    let summaries = execute(&cfg)?;
    let root = output_root(&cfg);
    summaries
        .into_iter()
        .map(|summary| {
            let dir = write_run(&root, &summary)?;
            Ok(RunOutput { dir, summary })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epochs,
    NExperts,
    Memory,
    Augment,
    Rsd,
    Direction,
    Student,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Epochs,
        SweepAxis::NExperts,
        SweepAxis::Memory,
        SweepAxis::Augment,
        SweepAxis::Rsd,
        SweepAxis::Direction,
        SweepAxis::Student,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epochs => "epochs",
            SweepAxis::NExperts => "n_experts",
            SweepAxis::Memory => "memory",
            SweepAxis::Augment => "augment",
            SweepAxis::Rsd => "rsd",
            SweepAxis::Direction => "direction",
            SweepAxis::Student => "student",
        }
    }

    /// The base config with this axis set to `value`.
    pub fn apply(self, base: &RawConfig, value: &str) -> Result<RawConfig> {
        let mut raw = base.clone();
        match self {
            SweepAxis::Epochs => raw.set("train.epochs", value)?,
            SweepAxis::Memory => raw.set("train.memory", value)?,
            SweepAxis::Rsd => raw.set("loss.rsd", value)?,
            SweepAxis::Direction => raw.set("loss.direction", value)?,
            SweepAxis::Student => raw.set("loss.student", value)?,
            SweepAxis::NExperts => {
                // explicit widths describe one depth only; sweep uniform blocks
                raw.remove("model.widths");
                raw.set("model.experts", value)?;
            }
            SweepAxis::Augment => match value {
                "on" | "true" | "yes" | "1" => raw.set("augment.enabled", "true")?,
                "off" | "false" | "no" | "0" => {
                    let keys: Vec<String> = raw
                        .entries()
                        .keys()
                        .filter(|k| k.starts_with("augment."))
                        .cloned()
                        .collect();
                    for k in keys {
                        raw.remove(&k);
                    }
                    raw.set("augment.enabled", "false")?;
                }
                other => return Err(RunError::Usage(format!("augment values are on/off, got {other:?}"))),
            },
        }
        Ok(raw)
    }
}

impl FromStr for SweepAxis {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            RunError::Usage(format!("unknown sweep axis {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// One line of the sweep aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

/// Named scalars summarizing a run. Extra evaluation modes add `acc:<mode>`.
pub fn run_metrics(record: &RunRecord) -> Vec<(String, f64)> {
    let mut out = vec![
        ("acc".to_string(), record.acc),
        ("af".to_string(), record.af),
        ("new_task_accuracy".to_string(), mean(&record.new_task_accuracy)),
    ];
    let bofs: Vec<f64> = record.bof.iter().flatten().copied().collect();
    if !bofs.is_empty() {
        out.push(("bof".to_string(), mean(&bofs)));
    }
    for (mode, matrix) in &record.extra_matrices {
        if let Ok((acc, _)) = mose_core::eval::acc_af(matrix) {
            out.push((format!("acc:{mode}"), acc));
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean and sample std per (value, metric), in value order then metric
/// first-seen order.
pub fn aggregate(axis: SweepAxis, groups: &[(String, Vec<RunRecord>)]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (value, records) in groups {
        let mut metrics: Vec<(String, Vec<f64>)> = Vec::new();
        for record in records {
            for (name, v) in run_metrics(record) {
                match metrics.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, vs)) => vs.push(v),
                    None => metrics.push((name, vec![v])),
                }
            }
        }
        for (metric, vs) in metrics {
            rows.push(SweepRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                metric,
                mean: mean(&vs),
                std: sample_std(&vs),
                runs: vs.len(),
            });
        }
    }
    rows
}

pub struct SweepOutput {
    pub csv: PathBuf,
    pub runs: Vec<RunOutput>,
    pub rows: Vec<SweepRow>,
}

/// `mose sweep`: the base config at each axis value, for every seed.
pub fn sweep(config_path: &Path, axis: SweepAxis, values: &[String]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(RunError::Usage("sweep needs at least one value".into()));
    }
    let base = RawConfig::load(config_path)?;
    base.resolve()?;
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| Ok(axis.apply(&base, v)?.resolve()?))
        .collect::<Result<_>>()?;
    let results: Vec<Vec<Summary>> = configs.par_iter().map(execute).collect::<Result<_>>()?;

    let root = output_root(&configs[0]);
    let mut runs = Vec::new();
    let mut groups = Vec::new();
    for (value, summaries) in values.iter().zip(results) {
        groups.push((value.clone(), summaries.iter().map(|s| s.record.clone()).collect()));
        for summary in summaries {
            let dir = write_run(&root, &summary)?;
            runs.push(RunOutput { dir, summary });
        }
    }
    let rows = aggregate(axis, &groups);
    let csv = root.join(format!("sweep_{}_{}.csv", axis.name(), base.hash()));
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).expect("sweep rows serialize");
    }
    write(&csv, w.into_inner().expect("in-memory writer"))?;
    Ok(SweepOutput { csv, runs, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub seed: u64,
}

/// Long-format rows for one run:
///
/// - `accuracy:task_<i>` (or `accuracy[<mode>]:task_<i>`): x is the checkpoint
/// - `new_task_accuracy`, `bof`: x is the task
/// - `acc_vs_memory`, `af_vs_memory`, `acc_vs_epochs`: one point per run
/// - `joint_*`: x is the joint-training epoch
///
/// Tasks, checkpoints and epochs are 1-based.
pub fn plot_rows(summary: &Summary) -> Vec<PlotRow> {
    let r = &summary.record;
    let seed = summary.seed;
    let mut rows = Vec::new();
    let mut push = |series: String, x: usize, y: f64| rows.push(PlotRow { series, x: x as f64, y, seed });

    let matrices = std::iter::once((None, &r.matrix)).chain(r.extra_matrices.iter().map(|(m, x)| (Some(m), x)));
    for (mode, matrix) in matrices {
        for (after, row) in matrix.rows().iter().enumerate() {
            for (task, &a) in row.iter().enumerate() {
                let series = match mode {
                    None => format!("accuracy:task_{}", task + 1),
                    Some(m) => format!("accuracy[{m}]:task_{}", task + 1),
                };
                push(series, after + 1, a);
            }
        }
    }
    for (t, &a) in r.new_task_accuracy.iter().enumerate() {
        push("new_task_accuracy".into(), t + 1, a);
    }
    for (t, b) in r.bof.iter().enumerate() {
        if let Some(b) = b {
            push("bof".into(), t + 1, *b);
        }
    }
    let memory = r.config.train.memory;
    push("acc_vs_memory".into(), memory, r.acc);
    push("af_vs_memory".into(), memory, r.af);
    push("acc_vs_epochs".into(), r.config.train.epochs, r.acc);
    if let Some(joint) = &r.joint {
        for (e, &a) in joint.test_accuracy.iter().enumerate() {
            push("joint_test_accuracy".into(), e + 1, a);
        }
        for (e, &a) in joint.buffer_accuracy.iter().enumerate() {
            push("joint_buffer_accuracy".into(), e + 1, a);
        }
        for (e, b) in joint.bof.iter().enumerate() {
            if let Some(b) = b {
                push("joint_bof".into(), e + 1, *b);
            }
        }
    }
    rows
}

/// Run summaries under `dir`: the directory itself if it holds one,
/// otherwise its immediate subdirectories in name order.
pub fn collect_summaries(dir: &Path) -> Result<Vec<Summary>> {
    let own = dir.join("summary.json");
    if own.is_file() {
        return Ok(vec![Summary::load(&own)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|p| Summary::load(&p.join("summary.json"))).collect()
}

/// `mose plot-data`: writes `plot_data.csv` into `dir`.
pub fn plot_data(dir: &Path) -> Result<PathBuf> {
    let summaries = collect_summaries(dir)?;
    if summaries.is_empty() {
        return Err(RunError::Usage(format!("{}: no run summaries found", dir.display())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for summary in &summaries {
        for row in plot_rows(summary) {
            w.serialize(row).expect("plot rows serialize");
        }
    }
    let path = dir.join("plot_data.csv");
    write(&path, w.into_inner().expect("in-memory writer"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_matches_hand_values() {
        assert_eq!(sample_std(&[0.5]), 0.0);
        assert_eq!(sample_std(&[0.3, 0.3, 0.3]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn axis_names_round_trip() {
        for axis in SweepAxis::ALL {
            assert_eq!(axis.name().parse::<SweepAxis>().unwrap(), axis);
        }
        assert!("width".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn augment_off_clears_policy_keys() {
        let base = RawConfig::parse("augment.jitter=0.5\ntrain.lr=0.01").unwrap();
        let off = SweepAxis::Augment.apply(&base, "off").unwrap();
        assert_eq!(off.get("augment.jitter"), None);
        assert_eq!(off.get("augment.enabled"), Some("false"));
        assert!(off.resolve().unwrap().spec.train.augment.is_none());
        assert!(SweepAxis::Augment.apply(&base, "maybe").is_err());
    }

    #[test]
    fn n_experts_drops_explicit_widths() {
        let base = RawConfig::parse("model.widths=16,16,8\nmodel.aligned_dim=8").unwrap();
        let cfg = SweepAxis::NExperts.apply(&base, "2").unwrap().resolve().unwrap();
        assert_eq!(cfg.spec.model.block_widths, vec![8, 8]);
    }
}
