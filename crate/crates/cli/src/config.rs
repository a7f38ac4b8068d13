use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use autoprune::pipeline::ExperimentConfig;
use clap::Args;

use crate::BadInput;

/// Flags shared by every stage; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset directory (else $AUTOPRUNE_DATA_DIR, else ./data/<dataset>).
    #[arg(long, value_name = "PATH")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "F")]
    pub beta: Option<f64>,
    /// Epochs of the stage being run.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Run directory shared by all stages.
    #[arg(long, value_name = "DIR", default_value = "runs/default")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Search,
    Prune,
}

pub fn parse_toml(text: &str, path: &Path) -> anyhow::Result<ExperimentConfig> {
    toml::from_str(text)
        .map_err(|e| BadInput(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

/// Config file (or `base`, or defaults) with flag overrides applied.
pub fn resolve(args: &CommonArgs, base: Option<ExperimentConfig>, stage: Stage) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| BadInput(format!("cannot read config {}: {e}", path.display())))?;
            parse_toml(&text, path)?
        }
        None => base.unwrap_or_default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    if let Some(a) = args.alpha {
        cfg.search.alpha = a;
    }
    if let Some(b) = args.beta {
        cfg.search.beta = b;
    }
    if let Some(e) = args.epochs {
        match stage {
            Stage::Pretrain => cfg.pretrain.epochs = e,
            Stage::Search => cfg.search.epochs = e,
            Stage::Prune => cfg.finetune.epochs = e,
        }
    }
    cfg.validate().map_err(|e| BadInput(format!("invalid config: {e}")))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    toml::to_string(cfg).context("serializing config")
}
