//! `autoprune`: pretrain, search, prune, report and describe.

mod config;
mod plot;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use autoprune::model::{build_model, MODEL_NAMES};
use autoprune::pipeline::DatasetKind;
use autoprune::pruner::load_checkpoint;
use autoprune::rng::{substream, INIT};
use clap::{Parser, Subcommand, ValueEnum};

use config::CommonArgs;

/// User-side mistake: bad flags, config, paths or files. Exit code 2.
#[derive(Debug)]
pub struct BadInput(pub String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

#[derive(Parser, Debug)]
#[command(name = "autoprune", version, about = "Learned channel pruning for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the unpruned baseline and save it under <out>/baseline.
    Pretrain(CommonArgs),
    /// Search remaining ratios starting from <out>/baseline.
    Search(CommonArgs),
    /// Round the ratios, slice the searched model and fine-tune it.
    Prune(CommonArgs),
    /// Write summary.csv and SVG plots for a run directory.
    Report {
        #[arg(long, value_name = "DIR", default_value = "runs/default")]
        out: PathBuf,
    },
    /// Print a model's layers, shapes and FLOPs.
    Describe {
        #[arg(long, value_name = "NAME", default_value = "cnn-small")]
        model: String,
        #[arg(long, value_enum, default_value = "mnist")]
        dataset: DatasetArg,
        /// Describe a saved checkpoint instead.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetArg {
    Mnist,
    Cifar10,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        }
    }
}

fn describe(model: &str, dataset: DatasetKind, checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    let graph = match checkpoint {
        Some(dir) => load_checkpoint::<f32>(&dir)?,
        None => {
            let (classes, shape) = match dataset {
                DatasetKind::Mnist => (10, [1, 28, 28]),
                DatasetKind::Cifar10 => (10, [3, 32, 32]),
            };
            build_model(model, classes, shape, &mut substream(0, INIT))
                .map_err(|e| BadInput(format!("{e}; available models: {}", MODEL_NAMES.join(", "))))?
        }
    };
    print!("{}", graph.describe());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use autoprune::Error as E;
    for cause in err.chain() {
        if cause.is::<BadInput>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                E::Format { .. } | E::UnknownModel(_) | E::InvalidArgument(_) | E::LabelOutOfRange { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => run::pretrain(&a),
        Command::Search(a) => run::search(&a),
        Command::Prune(a) => run::prune(&a),
        Command::Report { out } => report::report(&out),
        Command::Describe {
            model,
            dataset,
            checkpoint,
        } => describe(&model, dataset.into(), checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
