//! End-to-end experiment stages: data preparation, baseline training,
//! ratio search, pruning and fine-tuning, plus their CSV records.
//!
//! Each stage is a plain function so the command-line tool can run them
//! one at a time from checkpoints and tests can chain them in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, load_mnist, split_validation, Dataset, FileChecksum, Normalization, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelGraph};
use crate::pruner::{export_pruned, finalize_plan, fine_tune_config, PruningPlan};
use crate::rng::{substream, INIT};
use crate::search::{exact_fpr, run_search, MetricsRow, SearchConfig, SearchOutcome};
use crate::train::{accuracy, fit, EpochLog, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub dataset: DatasetKind,
    pub seed: u64,
    /// Share of the training images held out for ratio updates.
    pub val_fraction: f64,
    /// Use only the first `n` training images after the split.
    pub train_limit: Option<usize>,
    pub eval_batch: usize,
    pub pretrain: TrainConfig,
    pub search: SearchConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "cnn-small".into(),
            dataset: DatasetKind::Mnist,
            seed: 0,
            val_fraction: 0.1,
            train_limit: None,
            eval_batch: 500,
            pretrain: TrainConfig::default(),
            search: SearchConfig::default(),
            finetune: fine_tune_config(0),
        }
    }
}

impl ExperimentConfig {
    /// Copies the run seed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.search.seed = c.seed;
        c.finetune.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.eval_batch == 0 || self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        if self.train_limit == Some(0) {
            return Err(Error::InvalidArgument("train_limit must be >= 1".into()));
        }
        self.search.validate()
    }
}

/// Train / validation / test splits of one dataset.
#[derive(Debug)]
pub struct Prepared {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
    pub normalization: Normalization,
    pub checksums: Vec<FileChecksum>,
}

impl Prepared {
    pub fn input_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }
}

pub fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    let splits = match cfg.dataset {
        DatasetKind::Mnist => load_mnist::<f32>(dir)?,
        DatasetKind::Cifar10 => load_cifar10::<f32>(dir)?,
    };
    let (mut train, val) = split_validation(&splits.train, cfg.val_fraction, cfg.seed)?;
    if let Some(n) = cfg.train_limit {
        if n < train.len() {
            train = train.subset(&(0..n).collect::<Vec<_>>(), Split::Train)?;
        }
    }
    Ok(Prepared {
        train,
        val,
        test: splits.test,
        normalization: splits.normalization,
        checksums: splits.checksums,
    })
}

pub struct Baseline {
    pub model: ModelGraph<f32>,
    pub report: TrainReport,
    pub test_acc: f64,
}

/// Trains a freshly initialized model and keeps the best-validation epoch.
pub fn pretrain(cfg: &ExperimentConfig, data: &Prepared, on_epoch: impl FnMut(&EpochLog)) -> Result<Baseline> {
    let cfg = cfg.resolved();
    let classes = data.train.num_classes;
    let mut model = build_model(&cfg.model, classes, data.input_shape(), &mut substream(cfg.seed, INIT))?;
    let report = fit(&mut model, &data.train, Some(&data.val), &cfg.pretrain, on_epoch)?;
    let test_acc = accuracy(&model, &data.test, None, cfg.eval_batch)?;
    Ok(Baseline {
        model,
        report,
        test_acc,
    })
}

/// Runs the alternating ratio search starting from `model`.
pub fn search(
    cfg: &ExperimentConfig,
    model: ModelGraph<f32>,
    data: &Prepared,
    on_row: impl FnMut(&MetricsRow),
) -> Result<SearchOutcome<f32>> {
    let cfg = cfg.resolved();
    run_search(cfg.search.clone(), model, &data.train, &data.val, on_row)
}

pub struct Pruned {
    pub plan: PruningPlan,
    pub model: ModelGraph<f32>,
    /// Test accuracy of the searched weights under the final soft masks.
    pub searched_acc: f64,
    /// Test accuracy right after slicing, before fine-tuning.
    pub sliced_acc: f64,
    pub report: TrainReport,
    pub test_acc: f64,
}

impl Pruned {
    pub fn fpr(&self) -> f64 {
        self.plan.fpr()
    }
}

/// Rounds the searched ratios, slices the searched weights and fine-tunes.
pub fn prune_and_finetune(
    cfg: &ExperimentConfig,
    outcome: &SearchOutcome<f32>,
    data: &Prepared,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Pruned> {
    let cfg = cfg.resolved();
    let soft: Vec<Vec<f32>> = outcome.state.masks.iter().map(|m| m.by_channel_as()).collect();
    let searched_acc = accuracy(&outcome.model, &data.test, Some(&soft), cfg.eval_batch)?;
    let plan = finalize_plan(&outcome.model, &outcome.state.ratios, &outcome.state.rankings)?;
    debug_assert_eq!(plan.fpr(), exact_fpr(&outcome.model, &outcome.state.ratios)?);
    let mut model = export_pruned(&outcome.model, &plan)?;
    let sliced_acc = accuracy(&model, &data.test, None, cfg.eval_batch)?;
    let report = fit(&mut model, &data.train, Some(&data.val), &cfg.finetune, on_epoch)?;
    let test_acc = accuracy(&model, &data.test, None, cfg.eval_batch)?;
    Ok(Pruned {
        plan,
        model,
        searched_acc,
        sliced_acc,
        report,
        test_acc,
    })
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,loss,train_acc,val_acc";

pub fn epoch_csv(history: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for l in history {
        let val = l.val_acc.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.lr, l.loss, l.train_acc, val));
    }
    s
}

pub fn metrics_csv(layers: usize, rows: &[MetricsRow]) -> String {
    let mut s = MetricsRow::csv_header(layers);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Inverse of [`metrics_csv`].
pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let layers = cols
        .len()
        .checked_sub(10)
        .ok_or_else(|| bad("header too short".into()))?;
    if MetricsRow::csv_header(layers) != header {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                n + 1,
                f.len(),
                cols.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", n + 1, f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>()
                .map_err(|_| bad(format!("row {}: `{}` is not an integer", n + 1, f[i])))
        };
        rows.push(MetricsRow {
            iteration: int(0)?,
            epoch: int(1)?,
            lr_w: num(2)?,
            lr_r: num(3)?,
            ce: num(4)?,
            cost: num(5)?,
            total: num(6)?,
            val_acc: num(7)?,
            surrogate_fpr: num(8)?,
            exact_fpr: num(9)?,
            ratios: (10..f.len()).map(num).collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(bad("no metrics rows".into()));
    }
    Ok(rows)
}
