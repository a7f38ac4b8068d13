//! Run directory layout and the pretrain / search / prune stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use autoprune::data::{resolve_data_dir, FileChecksum, Normalization};
use autoprune::masking::{build_masks, LayerRanking, RefreshRecord};
use autoprune::model::ModelGraph;
use autoprune::pipeline::{self, epoch_csv, metrics_csv, ExperimentConfig, Prepared};
use autoprune::pruner::{load_checkpoint, save_checkpoint};
use autoprune::search::{SearchOutcome, SearchState};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, to_toml, CommonArgs, Stage};
use crate::BadInput;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const BASELINE: &str = "baseline";
pub const SEARCHED: &str = "searched";
pub const PRUNED: &str = "pruned";
pub const SEARCH_STATE: &str = "search_state.json";
pub const SEARCH_METRICS: &str = "search_metrics.csv";
pub const REFRESH_LOG: &str = "ranking_refresh.csv";
pub const PLAN: &str = "plan.json";
pub const PRETRAIN_LOG: &str = "pretrain.csv";
pub const FINETUNE_LOG: &str = "finetune.csv";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub baseline_top1: Option<f64>,
    /// Searched weights under the final soft masks.
    pub searched_top1: Option<f64>,
    /// Pruned model before fine-tuning.
    pub sliced_top1: Option<f64>,
    pub top1: Option<f64>,
    pub accuracy_drop: Option<f64>,
    pub fpr: Option<f64>,
    pub ratios: Option<Vec<f64>>,
    pub kept_channels: Option<Vec<usize>>,
    pub search_converged: Option<bool>,
}

/// Everything needed to rerun a directory's stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data_dir: PathBuf,
    pub checksums: Vec<FileChecksum>,
    pub normalization: Option<Normalization>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub metrics: FinalMetrics,
}

impl RunManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m = serde_json::from_str(&text).map_err(|e| BadInput(format!("{}: {e}", path.display())))?;
        Ok(Some(m))
    }

    fn save(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join(MANIFEST), &serde_json::to_string_pretty(self)?)?;
        write(&dir.join(CONFIG), &to_toml(&self.config)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SavedSearch {
    ratios: Vec<f64>,
    rankings: Vec<LayerRanking>,
    kink_counts: Vec<usize>,
    iteration: usize,
    epoch: usize,
    converged: bool,
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path, hint: &str) -> anyhow::Result<String> {
    if !path.exists() {
        bail!(BadInput(format!("{} not found; {hint}", path.display())));
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn checkpoint(dir: &Path, hint: &str) -> anyhow::Result<ModelGraph<f32>> {
    if !dir.join("manifest.json").exists() {
        bail!(BadInput(format!("no checkpoint in {}; {hint}", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

/// Config for a later stage: flags over `--config` over the run's snapshot.
fn stage_config(args: &CommonArgs, stage: Stage) -> anyhow::Result<(ExperimentConfig, Option<RunManifest>)> {
    let prior = RunManifest::load(&args.out)?;
    let cfg = resolve(args, prior.as_ref().map(|m| m.config.clone()), stage)?;
    Ok((cfg, prior))
}

fn load_data(args: &CommonArgs, cfg: &ExperimentConfig) -> anyhow::Result<(Prepared, PathBuf)> {
    let fallback = Path::new("data").join(cfg.dataset.dir_name());
    let dir = resolve_data_dir(args.data_dir.as_deref(), &fallback);
    if !dir.is_dir() {
        bail!(BadInput(format!("data directory {} does not exist", dir.display())));
    }
    let t = Instant::now();
    let data = pipeline::prepare(cfg, &dir)?;
    info!(
        "loaded {} train / {} validation / {} test images from {} in {:.1}s",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display(),
        t.elapsed().as_secs_f64()
    );
    Ok((data, dir))
}

fn ensure_model(cfg: &ExperimentConfig, model: &ModelGraph<f32>, dir: &Path) -> anyhow::Result<()> {
    if model.name() != cfg.model {
        bail!(BadInput(format!(
            "checkpoint in {} is a {} but the config asks for {}",
            dir.display(),
            model.name(),
            cfg.model
        )));
    }
    Ok(())
}

pub fn pretrain(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = resolve(args, None, Stage::Pretrain)?;
    let (data, data_dir) = load_data(args, &cfg)?;
    let t = Instant::now();
    let base = pipeline::pretrain(&cfg, &data, |l| {
        info!(
            "pretrain epoch {} loss {:.4} train {:.4} val {:?}",
            l.epoch, l.loss, l.train_acc, l.val_acc
        )
    })?;
    info!("baseline test top-1 {:.4}", base.test_acc);
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&base.model, &out.join(BASELINE))?;
    write(&out.join(PRETRAIN_LOG), &epoch_csv(&base.report.history))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg,
        data_dir,
        checksums: data.checksums.clone(),
        normalization: Some(data.normalization.clone()),
        timings: BTreeMap::from([("pretrain".to_string(), t.elapsed().as_secs_f64())]),
        metrics: FinalMetrics {
            baseline_top1: Some(base.test_acc),
            ..Default::default()
        },
    };
    manifest.save(out)
}

pub fn search(args: &CommonArgs) -> anyhow::Result<()> {
    let (cfg, prior) = stage_config(args, Stage::Search)?;
    let out = &args.out;
    let baseline = checkpoint(&out.join(BASELINE), "run `autoprune pretrain` first")?;
    ensure_model(&cfg, &baseline, &out.join(BASELINE))?;
    let (data, data_dir) = load_data(args, &cfg)?;
    let t = Instant::now();
    let outcome = pipeline::search(&cfg, baseline, &data, |r| {
        info!(
            "iter {} epoch {} ce {:.4} cost {:.4} val {:.4} fpr {:.4} R {:?}",
            r.iteration, r.epoch, r.ce, r.cost, r.val_acc, r.exact_fpr, r.ratios
        )
    })?;
    let layers = outcome.state.ratios.len();
    save_checkpoint(&outcome.model, &out.join(SEARCHED))?;
    write(&out.join(SEARCH_METRICS), &metrics_csv(layers, &outcome.metrics))?;
    write(&out.join(REFRESH_LOG), &refresh_csv(&outcome.diagnostics))?;
    let saved = SavedSearch {
        ratios: outcome.state.ratios.clone(),
        rankings: outcome.state.rankings.clone(),
        kink_counts: outcome.state.kink_counts.clone(),
        iteration: outcome.state.iteration,
        epoch: outcome.state.epoch,
        converged: outcome.converged,
    };
    write(&out.join(SEARCH_STATE), &serde_json::to_string_pretty(&saved)?)?;

    let mut manifest = prior.unwrap_or_else(|| fresh_manifest(&cfg, &data, data_dir.clone()));
    manifest.config = cfg.clone();
    manifest.seed = cfg.seed;
    manifest.data_dir = data_dir;
    manifest.timings.insert("search".into(), t.elapsed().as_secs_f64());
    manifest.metrics.ratios = Some(saved.ratios);
    manifest.metrics.search_converged = Some(saved.converged);
    info!("search finished after {} iterations", saved.iteration);
    manifest.save(out)
}

pub fn prune(args: &CommonArgs) -> anyhow::Result<()> {
    let (cfg, prior) = stage_config(args, Stage::Prune)?;
    let out = &args.out;
    let hint = "run `autoprune search` first";
    let model = checkpoint(&out.join(SEARCHED), hint)?;
    ensure_model(&cfg, &model, &out.join(SEARCHED))?;
    let saved: SavedSearch = serde_json::from_str(&read(&out.join(SEARCH_STATE), hint)?)
        .map_err(|e| BadInput(format!("{}: {e}", out.join(SEARCH_STATE).display())))?;
    let masks = build_masks(&saved.ratios, &saved.rankings)?;
    let outcome = SearchOutcome {
        model,
        state: SearchState {
            iteration: saved.iteration,
            epoch: saved.epoch,
            ratios: saved.ratios,
            rankings: saved.rankings,
            masks,
            kink_counts: saved.kink_counts,
            lr_w: 0.0,
            lr_r: 0.0,
        },
        metrics: Vec::new(),
        diagnostics: Vec::new(),
        converged: saved.converged,
    };
    let (data, data_dir) = load_data(args, &cfg)?;
    let t = Instant::now();
    let pruned = pipeline::prune_and_finetune(&cfg, &outcome, &data, |l| {
        info!(
            "finetune epoch {} loss {:.4} train {:.4} val {:?}",
            l.epoch, l.loss, l.train_acc, l.val_acc
        )
    })?;
    save_checkpoint(&pruned.model, &out.join(PRUNED))?;
    write(&out.join(PLAN), &serde_json::to_string_pretty(&pruned.plan)?)?;
    write(&out.join(FINETUNE_LOG), &epoch_csv(&pruned.report.history))?;

    let mut manifest = prior.unwrap_or_else(|| fresh_manifest(&cfg, &data, data_dir.clone()));
    manifest.config = cfg;
    manifest.timings.insert("prune".into(), t.elapsed().as_secs_f64());
    let m = &mut manifest.metrics;
    m.searched_top1 = Some(pruned.searched_acc);
    m.sliced_top1 = Some(pruned.sliced_acc);
    m.top1 = Some(pruned.test_acc);
    m.accuracy_drop = m.baseline_top1.map(|b| b - pruned.test_acc);
    m.fpr = Some(pruned.fpr());
    m.kept_channels = Some(pruned.plan.layers.iter().map(|l| l.kept_count).collect());
    info!(
        "pruned: FPR {:.4}, top-1 {:.4} (sliced {:.4}), drop {:?}",
        pruned.fpr(),
        pruned.test_acc,
        pruned.sliced_acc,
        m.accuracy_drop
    );
    manifest.save(out)
}

fn fresh_manifest(cfg: &ExperimentConfig, data: &Prepared, data_dir: PathBuf) -> RunManifest {
    RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        data_dir,
        checksums: data.checksums.clone(),
        normalization: Some(data.normalization.clone()),
        timings: BTreeMap::new(),
        metrics: FinalMetrics::default(),
    }
}

fn refresh_csv(records: &[RefreshRecord]) -> String {
    let mut s = format!("{}\n", RefreshRecord::CSV_HEADER);
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
